"""Axial multi-head self-attention for 5-D feature maps.

Attention runs along one spatial axis at a time: every 1-D fiber along that
axis is an independent token sequence whose tokens are the channel vectors.
The decoder block applies it along x, y and z, sums the three results and adds
them back onto its input.
"""

from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor, matmul, permute, reshape, softmax

AXES = {"x": 2, "y": 3, "z": 4}

_counters: list[Counter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[Counter]:
    """Collect multiply-accumulate counts of every attention matmul run inside the block.

    Keys are ``projections``, ``scores``, ``weighted_values`` and ``output_projection``.
    """
    c: Counter = Counter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def _tally(kind: str, a: Tensor, b: Tensor) -> None:
    if not _counters:
        return
    # batch extents * m * k * n for a [.., m, k] @ [.., k, n] product
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    macs = int(np.prod(batch, dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1]
    for c in _counters:
        c[kind] += macs


@dataclass
class AxialAttentionParams:
    """Projection weights per axis: ``wq/wk/wv`` are ``[channels, heads*head_dim]``, ``wo`` the reverse."""

    heads: int
    head_dim: int
    weights: dict[str, dict[str, Tensor]]
    positional_encoding: bool = False

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be positive")
        inner = self.heads * self.head_dim
        for axis, w in self.weights.items():
            if axis not in AXES:
                raise ValueError(f"unknown axis {axis!r}")
            c = w["wq"].shape[0]
            for key in ("wq", "wk", "wv"):
                if w[key].shape != (c, inner):
                    raise ValueError(f"{axis}.{key} has shape {w[key].shape}, expected {(c, inner)}")
            if w["wo"].shape != (inner, c):
                raise ValueError(f"{axis}.wo has shape {w['wo'].shape}, expected {(inner, c)}")

    @property
    def channels(self) -> int:
        return self.weights["x"]["wq"].shape[0]

    @property
    def shared(self) -> bool:
        return self.weights["x"] is self.weights["y"] is self.weights["z"]


def init_axial_attention(rng: np.random.Generator, channels: int, heads: int, head_dim: int,
                         dtype=np.float32, shared: bool = False,
                         positional_encoding: bool = False) -> AxialAttentionParams:
    inner = heads * head_dim

    def one_set():
        def u(fan_in, shape):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)
        return {
            "wq": u(channels, (channels, inner)),
            "wk": u(channels, (channels, inner)),
            "wv": u(channels, (channels, inner)),
            "wo": u(inner, (inner, channels)),
        }

    if shared:
        w = one_set()
        weights = {"x": w, "y": w, "z": w}
    else:
        weights = {axis: one_set() for axis in AXES}
    return AxialAttentionParams(heads, head_dim, weights, positional_encoding)


def sinusoidal_encoding(length: int, channels: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(channels)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / channels)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def _attend(tokens: Tensor, w: dict[str, Tensor], heads: int, head_dim: int) -> Tensor:
    """Multi-head self-attention over ``tokens`` [fibers, n, c] -> [fibers, n, c]."""
    f, n, _ = tokens.shape

    def split(t):
        _tally("projections", tokens, t)
        proj = matmul(tokens, t)
        return permute(reshape(proj, (f, n, heads, head_dim)), (0, 2, 1, 3))

    q, k, v = split(w["wq"]), split(w["wk"]), split(w["wv"])
    kt = permute(k, (0, 1, 3, 2))
    _tally("scores", q, kt)
    scores = matmul(q, kt) * (1.0 / math.sqrt(head_dim))
    attn = softmax(scores, axis=-1)
    _tally("weighted_values", attn, v)
    ctx = matmul(attn, v)
    ctx = reshape(permute(ctx, (0, 2, 1, 3)), (f, n, heads * head_dim))
    _tally("output_projection", ctx, w["wo"])
    return matmul(ctx, w["wo"])


def axis_attention(x: Tensor, axis: str, params: AxialAttentionParams) -> Tensor:
    """Self-attention along the fibers of one spatial axis of ``x`` [b, c, x, y, z]."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
    if x.ndim != 5:
        raise ValueError(f"expected [b, c, x, y, z], got shape {x.shape}")
    if x.shape[1] != params.channels:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, attention expects {params.channels}")
    a = AXES[axis]
    others = [d for d in (2, 3, 4) if d != a]
    perm = (0, *others, a, 1)
    moved = permute(x, perm)
    b, o1, o2, n, c = moved.shape
    tokens = reshape(moved, (b * o1 * o2, n, c))
    if params.positional_encoding:
        tokens = tokens + Tensor(sinusoidal_encoding(n, c, x.dtype))
    out = _attend(tokens, params.weights[axis], params.heads, params.head_dim)
    out = reshape(out, (b, o1, o2, n, c))
    return permute(out, tuple(np.argsort(perm)))


def full_attention(x: Tensor, params: AxialAttentionParams) -> Tensor:
    """Attention over all voxels as one sequence (x-axis weights); only used for cost comparisons."""
    b, c = x.shape[:2]
    tokens = reshape(permute(x, (0, 2, 3, 4, 1)), (b, -1, c))
    out = _attend(tokens, params.weights["x"], params.heads, params.head_dim)
    return permute(reshape(out, (b,) + x.shape[2:] + (c,)), (0, 4, 1, 2, 3))


def axial_decoder_block(upsampled: Tensor, params: AxialAttentionParams) -> Tensor:
    """``upsampled`` plus the sum of attention along x, y and z."""
    branch = axis_attention(upsampled, "x", params)
    branch = branch + axis_attention(upsampled, "y", params)
    branch = branch + axis_attention(upsampled, "z", params)
    return upsampled + branch


@dataclass(frozen=True)
class AttentionCost:
    projections: int
    scores: int
    weighted_values: int
    output_projection: int

    @property
    def total(self) -> int:
        return self.projections + self.scores + self.weighted_values + self.output_projection

    def as_counter(self) -> Counter:
        return Counter({
            "projections": self.projections,
            "scores": self.scores,
            "weighted_values": self.weighted_values,
            "output_projection": self.output_projection,
        })


def attention_cost(shape, channels: int, heads: int, head_dim: int, kind: str = "axial",
                   batch: int = 1) -> AttentionCost:
    """Exact multiply-accumulate count of one attention pass over a ``shape`` volume.

    ``axial`` counts the full decoder branch (three axes); ``full`` treats all
    voxels as a single sequence. For ``N`` voxels and ``D = heads*head_dim`` the
    score term is ``N * (x + y + z) * D`` for axial and ``N**2 * D`` for full.
    """
    if any(int(s) < 1 for s in shape) or min(channels, heads, head_dim, batch) < 1:
        raise ValueError("all extents must be positive")
    sx, sy, sz = (int(s) for s in shape)
    n = sx * sy * sz
    d = heads * head_dim
    if kind == "axial":
        lengths, passes = (sx, sy, sz), 3
    elif kind == "full":
        lengths, passes = (n,), 1
    else:
        raise ValueError(f"kind must be 'axial' or 'full', got {kind!r}")
    seq = sum(lengths)
    return AttentionCost(
        projections=batch * passes * 3 * n * channels * d,
        scores=batch * n * seq * d,
        weighted_values=batch * n * seq * d,
        output_projection=batch * passes * n * d * channels,
    )
