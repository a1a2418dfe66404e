"""Spatial layers (GCN, multi-head GAT, all-pairs attention) and shared building blocks.

Every layer accepts node features with arbitrary leading batch axes, i.e.
``[..., n, d]``, so the same layer serves a single snapshot, a batch, or a
batch of time slices.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .graph import NeighborSets, NormalizedAdjacency, spmm
from .tensor import ShapeError, Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": lambda x: x,
    "sigmoid": T.sigmoid,
    "relu": T.relu,
    "tanh": T.tanh,
}


def get_activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


class Module:
    """Parameter container.  Parameters are Tensor attributes with ``requires_grad``."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.name = name
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != parameter {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------


def fc_forward(W: Tensor, b: Tensor | None, x: Tensor, activation: str = "identity") -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"fc: input feature dim {x.shape} does not match weight {W.shape}")
    out = T.matmul(x, W) if b is None else T.linear(x, W, b)
    return get_activation(activation)(out)


class Dense(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 activation: str = "identity", bias: bool = True):
        get_activation(activation)
        self.W = _param(glorot(rng, d_in, d_out))
        self.b = _param(np.zeros(d_out)) if bias else None
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return fc_forward(self.W, self.b, x, self.activation)


# ---------------------------------------------------------------------------
# GCN
# ---------------------------------------------------------------------------


class GCNLayer(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, activation: str = "relu"):
        if d_out <= 0:
            raise ValueError("GCN output dim must be positive")
        get_activation(activation)
        self.W = _param(glorot(rng, d_in, d_out))
        self.activation = activation

    def __call__(self, x: Tensor, a_hat: NormalizedAdjacency) -> Tensor:
        return gcn_forward(self, x, a_hat)


def gcn_forward(layer: GCNLayer, x: Tensor, a_hat: NormalizedAdjacency) -> Tensor:
    """activation(A_hat X W) with A_hat applied along the node axis."""
    if x.ndim < 2 or x.shape[-2] != a_hat.n:
        raise ShapeError(f"gcn: input {x.shape} does not have {a_hat.n} nodes on axis -2")
    if x.shape[-1] != layer.W.shape[0]:
        raise ShapeError(f"gcn: feature dim of {x.shape} does not match W {layer.W.shape}")
    return get_activation(layer.activation)(T.matmul(spmm(a_hat, x), layer.W))


# ---------------------------------------------------------------------------
# GAT
# ---------------------------------------------------------------------------


class GATLayer(Module):
    """K-head graph attention; head outputs are concatenated to K * head_dim."""

    def __init__(self, d_in: int, heads: int, head_dim: int, rng: np.random.Generator,
                 activation: str = "sigmoid", attention_slope: float = 0.2):
        get_activation(activation)
        self.heads = heads
        self.head_dim = head_dim
        # per-head W^k stored side by side: columns k*h'..(k+1)*h'
        self.W = _param(np.concatenate(
            [glorot(rng, d_in, head_dim) for _ in range(heads)], axis=1))
        # a^k = [a_target ; a_source], one row per head
        self.a = _param(np.stack([glorot(rng, 2 * head_dim, 1, shape=2 * head_dim)
                                  for _ in range(heads)]))
        self.activation = activation
        self.attention_slope = attention_slope
        self.last_score_count = 0

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim

    def __call__(self, x: Tensor, nbrs: NeighborSets) -> Tensor:
        return gat_forward(self, x, nbrs)


def _gat_project(layer: GATLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.W.shape[0]:
        raise ShapeError(f"gat: feature dim of {x.shape} does not match W {layer.W.shape}")
    n = x.shape[-2]
    wh = T.matmul(x, layer.W)                                  # [..., n, K*h']
    wh = T.reshape(wh, x.shape[:-2] + (n, layer.heads, layer.head_dim))
    nd = wh.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(wh, axes)                               # [..., K, n, h']


def _gat_alpha(layer: GATLayer, wh: Tensor, nbrs: NeighborSets) -> Tensor:
    K, hd = layer.heads, layer.head_dim
    a_tgt = T.reshape(layer.a[:, :hd], (K, hd, 1))
    a_src = T.reshape(layer.a[:, hd:], (K, hd, 1))
    s_tgt = T.matmul(wh, a_tgt)                                # [..., K, n, 1]
    s_src = T.matmul(wh, a_src)
    nd = s_src.ndim
    s_src = T.transpose(s_src, tuple(range(nd - 2)) + (nd - 1, nd - 2))  # [..., K, 1, n]
    logits = T.leaky_relu(s_tgt + s_src, layer.attention_slope)          # [..., K, n, n]
    logits = T.masked_fill(logits, nbrs.mask())
    layer.last_score_count = nbrs.total()
    return T.softmax(logits, axis=-1)


def gat_attention_scores(layer: GATLayer, x: Tensor, nbrs: NeighborSets, k: int) -> list[dict[int, float]]:
    """Head-k attention as ``[{j: alpha_ij for j in N_i} for i in nodes]``."""
    if not 0 <= k < layer.heads:
        raise IndexError(f"head index {k} outside 0..{layer.heads - 1}")
    if x.ndim != 2:
        raise ShapeError(f"gat_attention_scores expects a single [n, d] snapshot, got {x.shape}")
    with T.no_grad():
        alpha = _gat_alpha(layer, _gat_project(layer, x), nbrs).data[k]
    return [{j: float(alpha[i, j]) for j in nbrs[i]} for i in range(nbrs.n)]


def gat_forward(layer: GATLayer, x: Tensor, nbrs: NeighborSets) -> Tensor:
    if x.ndim < 2 or x.shape[-2] != nbrs.n:
        raise ShapeError(f"gat: input {x.shape} does not have {nbrs.n} nodes on axis -2")
    wh = _gat_project(layer, x)
    alpha = _gat_alpha(layer, wh, nbrs)
    heads = T.matmul(alpha, wh)                                # [..., K, n, h']
    nd = heads.ndim
    heads = T.transpose(heads, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    out = T.reshape(heads, x.shape[:-1] + (layer.out_dim,))
    return get_activation(layer.activation)(out)


# ---------------------------------------------------------------------------
# scaled dot-product multi-head attention
# ---------------------------------------------------------------------------


class MultiHeadAttention(Module):
    """Attention along axis -2 of ``[..., S, D]`` inputs."""

    def __init__(self, d_model: int, heads: int, head_dim: int, rng: np.random.Generator):
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.Wq = _param(glorot(rng, d_model, inner))
        self.Wk = _param(glorot(rng, d_model, inner))
        self.Wv = _param(glorot(rng, d_model, inner))
        self.Wo = _param(glorot(rng, inner, d_model))
        self.last_score_count = 0
        self.calls = 0

    def _split(self, x: Tensor) -> Tensor:
        x = T.reshape(x, x.shape[:-1] + (self.heads, self.head_dim))
        nd = x.ndim
        return T.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))  # [..., K, S, h']

    def attend(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        d_model = self.Wq.shape[0]
        for name, t in (("query", q_in), ("key", k_in), ("value", v_in)):
            if t.shape[-1] != d_model:
                raise ShapeError(f"attention: {name} feature dim {t.shape} != model dim {d_model}")
        if k_in.shape[-2] != v_in.shape[-2]:
            raise ShapeError(f"attention: key {k_in.shape} and value {v_in.shape} lengths differ")
        q = self._split(T.matmul(q_in, self.Wq))
        k = self._split(T.matmul(k_in, self.Wk))
        v = self._split(T.matmul(v_in, self.Wv))
        nd = k.ndim
        kt = T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
        logits = T.scale(T.matmul(q, kt), 1.0 / math.sqrt(self.head_dim))  # [..., K, Sq, Sk]
        self.last_score_count = logits.shape[-1] * logits.shape[-2]
        self.calls += 1
        ctx = T.matmul(T.softmax(logits, axis=-1), v)                      # [..., K, Sq, h']
        nd = ctx.ndim
        ctx = T.transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
        ctx = T.reshape(ctx, q_in.shape[:-1] + (self.heads * self.head_dim,))
        return T.matmul(ctx, self.Wo)


class FullSpatialAttention(MultiHeadAttention):
    """All-pairs attention across the n nodes of each snapshot (no neighbor mask)."""

    def __init__(self, d_model: int, heads: int, head_dim: int, rng: np.random.Generator):
        if heads * head_dim != d_model:
            raise ValueError(f"full spatial attention needs heads*head_dim == D, got "
                             f"{heads}*{head_dim} != {d_model}")
        super().__init__(d_model, heads, head_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return full_spatial_attention_forward(self, x)


def full_spatial_attention_forward(layer: FullSpatialAttention, x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"full attention needs [..., n, D], got {x.shape}")
    return layer.attend(x, x, x)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"STGW"
FORMAT_VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray], kind: str = "", meta: str = "") -> bytes:
    """Serialize named float64 arrays.

    Layout (all integers little-endian):
      magic ``STGW`` | u32 version | u32 len + utf-8 kind | u32 len + utf-8 meta |
      u32 count | per tensor: u32 len + utf-8 name, u32 ndim, u64 dims..., f64 data
    """
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for text in (kind, meta):
        raw = text.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[str, str, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise ValueError("not a checkpoint: bad magic bytes")
    pos = 4
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")

    def read_text():
        nonlocal pos
        (length,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        text = blob[pos:pos + length].decode()
        pos += length
        return text

    kind = read_text()
    meta = read_text()
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        name = read_text()
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        tensors[name] = arr.astype(np.float64)
    if pos != len(blob):
        raise ValueError("trailing bytes after checkpoint payload")
    return kind, meta, tensors


def save_checkpoint(path: str | Path, module: Module, kind: str = "", meta: str = "") -> None:
    Path(path).write_bytes(encode_checkpoint(module.state_dict(), kind, meta))


def load_checkpoint(path: str | Path) -> tuple[str, str, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
