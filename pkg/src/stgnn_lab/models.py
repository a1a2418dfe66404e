"""The four experiment models.

* ``TGCNModel``: GRU cell whose inputs pass through a spatial layer
  (2-layer GCN for T-GCN, GAT for T-GAT).
* ``GMANLite``: encoder/decoder of spatio-temporal attention blocks; the
  spatial half of each block is all-pairs attention (GMAN), GAT (GMAN-GAT)
  or GCN (GMAN-GCN).

All models share the call signature ``model(x, times, ctx) -> [B, Q, n]``
where ``x`` is ``[B, P, n, d]`` in normalized units and ``times`` is an
integer array ``[B, P + Q, 2]`` of (day-of-week, slot-of-day) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import Graph, NeighborSets, NormalizedAdjacency, neighbor_sets, normalize_adjacency
from .layers import (
    Dense,
    FullSpatialAttention,
    GATLayer,
    GCNLayer,
    Module,
    MultiHeadAttention,
    _param,
    gat_forward,
    gcn_forward,
    full_spatial_attention_forward,
    glorot,
)
from .tensor import ShapeError, Tensor

SPATIAL_KINDS = ("gcn", "gat", "full-attn")
BACKBONES = ("rnn", "attn")


@dataclass(frozen=True)
class GraphContext:
    a_hat: NormalizedAdjacency
    nbrs: NeighborSets

    @property
    def n(self) -> int:
        return self.a_hat.n

    @classmethod
    def from_graph(cls, g: Graph) -> "GraphContext":
        return cls(normalize_adjacency(g), neighbor_sets(g))


# ---------------------------------------------------------------------------
# T-GCN / T-GAT
# ---------------------------------------------------------------------------


class TGCNCell(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, spatial: str = "gcn",
                 gcn_inner: int = 64, gcn_output_activation: str = "sigmoid",
                 heads: int = 8, head_dim: int = 8, attention_slope: float = 0.2,
                 gat_activation: str = "sigmoid"):
        self.spatial_kind = spatial
        self.hidden = hidden
        if spatial == "gcn":
            self.gcn0 = GCNLayer(d_in, gcn_inner, rng, "relu")
            self.gcn1 = GCNLayer(gcn_inner, hidden, rng, gcn_output_activation)
        elif spatial == "gat":
            if heads * head_dim != hidden:
                raise ValueError(f"T-GAT needs heads*head_dim == hidden ({heads}*{head_dim} != {hidden})")
            self.gat = GATLayer(d_in, heads, head_dim, rng, gat_activation, attention_slope)
        else:
            raise ValueError(f"recurrent backbone supports spatial kinds gcn|gat, got {spatial!r}")
        self.W_u = _param(glorot(rng, 2 * hidden, hidden))
        self.W_r = _param(glorot(rng, 2 * hidden, hidden))
        self.W_c = _param(glorot(rng, 2 * hidden, hidden))
        self.b_u = _param(np.zeros(hidden))
        self.b_r = _param(np.zeros(hidden))
        self.b_c = _param(np.zeros(hidden))

    def spatial(self, x: Tensor, ctx: GraphContext) -> Tensor:
        if self.spatial_kind == "gcn":
            return gcn_forward(self.gcn1, gcn_forward(self.gcn0, x, ctx.a_hat), ctx.a_hat)
        return gat_forward(self.gat, x, ctx.nbrs)


def tgcn_cell_step(cell: TGCNCell, x_t: Tensor, h_prev: Tensor, ctx: GraphContext) -> Tensor:
    """One GRU update; gates see ``[spatial(x_t) || h_prev]`` per node."""
    if h_prev.shape[-1] != cell.hidden or h_prev.shape[:-1] != x_t.shape[:-1]:
        raise ShapeError(f"tgcn cell: x_t {x_t.shape} and h_prev {h_prev.shape} are inconsistent")
    f = cell.spatial(x_t, ctx)
    fh = T.concat([f, h_prev], axis=-1)
    u = T.sigmoid(T.linear(fh, cell.W_u, cell.b_u))
    r = T.sigmoid(T.linear(fh, cell.W_r, cell.b_r))
    c = T.tanh(T.linear(T.concat([f, r * h_prev], axis=-1), cell.W_c, cell.b_c))
    return u * h_prev + (1.0 - u) * c


class TGCNModel(Module):
    def __init__(self, d_in: int, horizon: int, rng: np.random.Generator, hidden: int = 64,
                 spatial: str = "gcn", **cell_kw):
        self.cell = TGCNCell(d_in, hidden, rng, spatial=spatial, **cell_kw)
        self.W_out = _param(glorot(rng, hidden, horizon))
        self.b_out = _param(np.zeros(horizon))
        self.horizon = horizon

    @property
    def kind(self) -> str:
        return f"rnn/{self.cell.spatial_kind}"

    def __call__(self, x: Tensor, times, ctx: GraphContext) -> Tensor:
        return tgcn_forward(self, x, ctx)


def tgcn_forward(model: TGCNModel, window: Tensor, ctx: GraphContext) -> Tensor:
    if window.ndim != 4:
        raise ShapeError(f"tgcn: window must be [B, P, n, d], got {window.shape}")
    B, P, n, _ = window.shape
    if P < 1:
        raise ShapeError("tgcn: need at least one input step")
    h = Tensor(np.zeros((B, n, model.cell.hidden)))
    for t in range(P):
        h = tgcn_cell_step(model.cell, window[:, t], h, ctx)
    out = T.linear(h, model.W_out, model.b_out)           # [B, n, Q]
    return T.transpose(out, (0, 2, 1))


# ---------------------------------------------------------------------------
# GMAN-lite
# ---------------------------------------------------------------------------


class STEmbedding(Module):
    """Learnable node table plus a time projection of (day-of-week, slot) one-hots."""

    def __init__(self, n: int, d_model: int, slots_per_day: int, rng: np.random.Generator):
        self.slots_per_day = slots_per_day
        self.node_emb = _param(glorot(rng, n, d_model))
        self.se1 = Dense(d_model, d_model, rng, "relu")
        self.se2 = Dense(d_model, d_model, rng)
        # first time layer acts on a 7 + slots one-hot; implemented as row lookups
        self.time_W = _param(glorot(rng, 7 + slots_per_day, d_model))
        self.time_b = _param(np.zeros(d_model))
        self.te2 = Dense(d_model, d_model, rng)


def st_embedding(ste: STEmbedding, node_indices, timestamps) -> Tensor:
    """``[..., T, 2]`` (dow, slot) pairs -> ``[..., T, n, D]``."""
    times = np.asarray(timestamps, dtype=np.int64)
    if times.shape[-1] != 2:
        raise ShapeError(f"timestamps must end in (day-of-week, slot) pairs, got {times.shape}")
    dow, slot = times[..., 0], times[..., 1]
    if dow.size and (dow.min() < 0 or dow.max() > 6):
        raise ValueError("day-of-week outside 0..6")
    if slot.size and (slot.min() < 0 or slot.max() >= ste.slots_per_day):
        raise ValueError(f"slot-of-day outside 0..{ste.slots_per_day - 1}")
    spatial = ste.se2(ste.se1(T.embedding(ste.node_emb, np.asarray(node_indices))))   # [n, D]
    hidden = T.embedding(ste.time_W, dow) + T.embedding(ste.time_W, slot + 7) + ste.time_b
    temporal = ste.te2(T.relu(hidden))                                                # [..., T, D]
    temporal = T.reshape(temporal, temporal.shape[:-1] + (1, temporal.shape[-1]))
    return temporal + spatial


def _swap_time_node(x: Tensor) -> Tensor:
    nd = x.ndim
    return T.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def temporal_attention(att: MultiHeadAttention, h: Tensor, ste: Tensor) -> Tensor:
    """Per-node attention across the T time positions of ``h + ste`` (no causal mask)."""
    if h.shape != ste.shape:
        raise ShapeError(f"temporal attention: h {h.shape} and ste {ste.shape} differ")
    x = _swap_time_node(h + ste)                          # [..., n, T, D]
    return _swap_time_node(att.attend(x, x, x))


class GatedFusion(Module):
    def __init__(self, d_model: int, rng: np.random.Generator):
        self.W_s = _param(glorot(rng, d_model, d_model))
        self.W_t = _param(glorot(rng, d_model, d_model))
        self.b = _param(np.zeros(d_model))


def gated_fusion(fuse: GatedFusion, h_s: Tensor, h_t: Tensor) -> Tensor:
    if h_s.shape != h_t.shape:
        raise ShapeError(f"gated fusion: shapes {h_s.shape} and {h_t.shape} differ")
    z = T.sigmoid(T.matmul(h_s, fuse.W_s) + T.linear(h_t, fuse.W_t, fuse.b))
    return z * h_s + (1.0 - z) * h_t


def transform_attention(att: MultiHeadAttention, h_enc: Tensor, ste_in: Tensor, ste_out: Tensor) -> Tensor:
    """Queries from future embeddings, keys from past embeddings, values from encoder states."""
    if h_enc.shape != ste_in.shape or ste_out.shape[:-3] != h_enc.shape[:-3] \
            or ste_out.shape[-2:] != h_enc.shape[-2:]:
        raise ShapeError(f"transform attention: h_enc {h_enc.shape}, ste_in {ste_in.shape}, "
                         f"ste_out {ste_out.shape} are inconsistent")
    out = att.attend(_swap_time_node(ste_out), _swap_time_node(ste_in), _swap_time_node(h_enc))
    return _swap_time_node(out)


class STBlock(Module):
    def __init__(self, d_model: int, heads: int, head_dim: int, spatial: str,
                 rng: np.random.Generator, attention_slope: float = 0.2):
        self.spatial_kind = spatial
        self.temporal = MultiHeadAttention(d_model, heads, head_dim, rng)
        if spatial == "full-attn":
            self.spatial = FullSpatialAttention(d_model, heads, head_dim, rng)
        elif spatial == "gat":
            if heads * head_dim != d_model:
                raise ValueError(f"GAT block needs heads*head_dim == D ({heads}*{head_dim} != {d_model})")
            self.spatial = GATLayer(d_model, heads, head_dim, rng, "relu", attention_slope)
        elif spatial == "gcn":
            self.spatial = GCNLayer(d_model, d_model, rng, "relu")
        else:
            raise ValueError(f"unknown spatial kind {spatial!r}; choose from {SPATIAL_KINDS}")
        self.fusion = GatedFusion(d_model, rng)

    def spatial_forward(self, x: Tensor, ctx: GraphContext) -> Tensor:
        if self.spatial_kind == "full-attn":
            return full_spatial_attention_forward(self.spatial, x)
        if self.spatial_kind == "gat":
            return gat_forward(self.spatial, x, ctx.nbrs)
        return gcn_forward(self.spatial, x, ctx.a_hat)

    def __call__(self, h: Tensor, ste: Tensor, ctx: GraphContext) -> Tensor:
        h_s = self.spatial_forward(h + ste, ctx)
        h_t = temporal_attention(self.temporal, h, ste)
        return h + gated_fusion(self.fusion, h_s, h_t)


class GMANLite(Module):
    def __init__(self, n: int, d_in: int, horizon: int, rng: np.random.Generator,
                 spatial: str = "full-attn", d_model: int = 64, heads: int = 8, head_dim: int = 8,
                 layers: int = 3, slots_per_day: int = 288, attention_slope: float = 0.2):
        if spatial not in SPATIAL_KINDS:
            raise ValueError(f"unknown spatial kind {spatial!r}; choose from {SPATIAL_KINDS}")
        if heads * head_dim != d_model:
            raise ValueError(f"attention backbone needs heads*head_dim == D ({heads}*{head_dim} != {d_model})")
        self.n = n
        self.horizon = horizon
        self.spatial_kind = spatial
        self.in1 = Dense(d_in, d_model, rng, "relu")
        self.in2 = Dense(d_model, d_model, rng)
        self.ste = STEmbedding(n, d_model, slots_per_day, rng)
        self.encoder = [STBlock(d_model, heads, head_dim, spatial, rng, attention_slope)
                        for _ in range(layers)]
        self.transform = MultiHeadAttention(d_model, heads, head_dim, rng)
        self.decoder = [STBlock(d_model, heads, head_dim, spatial, rng, attention_slope)
                        for _ in range(layers)]
        self.out1 = Dense(d_model, d_model, rng, "relu")
        self.out2 = Dense(d_model, 1, rng)

    @property
    def kind(self) -> str:
        return f"attn/{self.spatial_kind}"

    def __call__(self, x: Tensor, times, ctx: GraphContext) -> Tensor:
        return gman_lite_forward(self, x, times, ctx)


def gman_lite_forward(model: GMANLite, window: Tensor, timestamps, ctx: GraphContext) -> Tensor:
    if window.ndim != 4:
        raise ShapeError(f"gman: window must be [B, P, n, d], got {window.shape}")
    B, P, n, _ = window.shape
    Q = model.horizon
    times = np.asarray(timestamps, dtype=np.int64)
    if times.shape != (B, P + Q, 2):
        raise ShapeError(f"gman: timestamps must be [{B}, {P + Q}, 2], got {times.shape}")
    if n != model.n:
        raise ShapeError(f"gman: window has {n} nodes, model was built for {model.n}")

    ste = st_embedding(model.ste, np.arange(n), times)        # [B, P+Q, n, D]
    ste_in = ste[:, :P]
    ste_out = ste[:, P:]
    h = model.in2(model.in1(window))
    for block in model.encoder:
        h = block(h, ste_in, ctx)
    h = transform_attention(model.transform, h, ste_in, ste_out)
    for block in model.decoder:
        h = block(h, ste_out, ctx)
    y = model.out2(model.out1(h))                             # [B, Q, n, 1]
    return T.reshape(y, (B, Q, n))


# ---------------------------------------------------------------------------
# factory
# ---------------------------------------------------------------------------


def default_layers(n: int) -> int:
    return 2 if n > 512 else 3


def build_model(backbone: str, spatial: str, n: int, horizon: int, seed: int, d_in: int = 1,
                hidden: int = 64, heads: int = 8, head_dim: int = 8, layers: int | None = None,
                gcn_inner: int = 64, gcn_output_activation: str = "sigmoid",
                attention_slope: float = 0.2, slots_per_day: int = 288) -> Module:
    rng = np.random.default_rng(seed)
    if backbone == "rnn":
        return TGCNModel(d_in, horizon, rng, hidden=hidden, spatial=spatial,
                         gcn_inner=gcn_inner, gcn_output_activation=gcn_output_activation,
                         heads=heads, head_dim=head_dim, attention_slope=attention_slope)
    if backbone == "attn":
        return GMANLite(n, d_in, horizon, rng, spatial=spatial, d_model=hidden, heads=heads,
                        head_dim=head_dim, layers=default_layers(n) if layers is None else layers,
                        slots_per_day=slots_per_day, attention_slope=attention_slope)
    raise ValueError(f"unknown backbone {backbone!r}; choose from {BACKBONES}")


def spatial_layers(model: Module) -> list[Module]:
    """Spatial layers of a model, for attention-score instrumentation."""
    if isinstance(model, TGCNModel):
        return [model.cell.gat] if model.cell.spatial_kind == "gat" else []
    if isinstance(model, GMANLite):
        return [b.spatial for b in model.encoder + model.decoder
                if b.spatial_kind in ("gat", "full-attn")]
    return []
