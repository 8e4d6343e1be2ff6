"""Multi-head attention restricted to a sparse row/column pattern.

The forward and backward passes are written out by hand so that nothing of
size ``n_rows x n_cols`` is ever materialized; every intermediate is either
per-row, per-column or per mask entry (times heads). Entries are processed
in fixed-size chunks, which bounds the ``entries x heads x d_head`` gathers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import InteractionIndex

PIXELS_TO_VOXELS = "2d->3d"
VOXELS_TO_PIXELS = "3d->2d"

CHUNK_ENTRIES = 1 << 16


@dataclass(frozen=True, eq=False)
class SparseMask:
    """Compressed-row pattern: row ``r`` attends to ``col_indices[row_offsets[r]:row_offsets[r+1]]``."""

    row_offsets: torch.Tensor
    col_indices: torch.Tensor
    n_rows: int
    n_cols: int
    direction: str = "generic"

    def __post_init__(self):
        offsets = torch.as_tensor(self.row_offsets, dtype=torch.int64)
        cols = torch.as_tensor(self.col_indices, dtype=torch.int64)
        if offsets.shape != (self.n_rows + 1,) or offsets[0] != 0 or offsets[-1] != cols.numel():
            raise ValueError("row_offsets inconsistent with col_indices")
        counts = offsets[1:] - offsets[:-1]
        if (counts < 0).any():
            raise ValueError("row_offsets must be non-decreasing")
        rows = torch.repeat_interleave(torch.arange(self.n_rows), counts)
        if cols.numel():
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise ValueError("column index out of range")
            same_row = rows[1:] == rows[:-1]
            if (cols[1:][same_row] <= cols[:-1][same_row]).any():
                raise ValueError("column indices must be strictly increasing within a row")
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "row_indices", rows)

    @property
    def nnz(self) -> int:
        return int(self.col_indices.numel())

    @property
    def row_counts(self) -> torch.Tensor:
        return self.row_offsets[1:] - self.row_offsets[:-1]

    @classmethod
    def from_coo(cls, rows, cols, n_rows: int, n_cols: int, direction: str = "generic") -> "SparseMask":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size:
            keys = np.unique(rows * n_cols + cols)
            rows, cols = keys // n_cols, keys % n_cols
        offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=offsets[1:])
        return cls(torch.from_numpy(offsets), torch.from_numpy(cols), n_rows, n_cols, direction)

    @classmethod
    def from_dense(cls, dense: torch.Tensor, direction: str = "generic") -> "SparseMask":
        rows, cols = torch.nonzero(torch.as_tensor(dense, dtype=torch.bool), as_tuple=True)
        return cls.from_coo(rows.numpy(), cols.numpy(), dense.shape[0], dense.shape[1], direction)

    @classmethod
    def from_index(cls, index: InteractionIndex, direction: str) -> "SparseMask":
        """Pattern for one attention direction of a 2D/3D block.

        ``2d->3d`` has one row per voxel attending over pixels; ``3d->2d`` is
        the transpose.
        """
        pix, vox = index.pixel_flat, index.voxel_flat
        if direction == PIXELS_TO_VOXELS:
            return cls.from_coo(vox, pix, index.n_voxels_total, index.n_pixels_total, direction)
        if direction == VOXELS_TO_PIXELS:
            return cls.from_coo(pix, vox, index.n_pixels_total, index.n_voxels_total, direction)
        raise ValueError(f"unknown direction {direction!r}")

    def to_dense(self) -> torch.Tensor:
        dense = torch.zeros(self.n_rows, self.n_cols, dtype=torch.bool)
        dense[self.row_indices, self.col_indices] = True
        return dense

    def permuted_storage(self, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        """Row/col entry lists with entries shuffled inside each row (for order tests)."""
        keys = self.row_indices.double() + torch.rand(self.nnz, generator=generator, dtype=torch.float64) * 0.5
        order = torch.argsort(keys)
        return self.row_indices[order], self.col_indices[order]


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Projection weights applied as ``x @ w``; heads are contiguous column blocks."""

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    n_heads: int

    def __post_init__(self):
        d_model, inner = self.w_q.shape
        if inner % self.n_heads:
            raise ValueError("projection width must be divisible by n_heads")
        for w in (self.w_k, self.w_v):
            if w.shape != (d_model, inner):
                raise ValueError("q/k/v projections must share a shape")
        if self.w_o.shape != (inner, d_model):
            raise ValueError("output projection has the wrong shape")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[1] // self.n_heads

    @classmethod
    def init(cls, d_model: int, n_heads: int, generator=None, dtype=torch.float32, zero_output=False):
        def draw(rows, cols, std):
            return torch.randn(rows, cols, generator=generator, dtype=dtype) * std

        std = d_model**-0.5
        w_o = torch.zeros(d_model, d_model, dtype=dtype) if zero_output else draw(d_model, d_model, std)
        return cls(draw(d_model, d_model, std), draw(d_model, d_model, std), draw(d_model, d_model, std), w_o, n_heads)


@dataclass(eq=False)
class AttentionCache:
    target: torch.Tensor
    source: torch.Tensor
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    weights: torch.Tensor  # (nnz, heads), entry order of the mask
    normalizers: torch.Tensor  # (n_rows, heads) softmax denominators after max shift
    heads: torch.Tensor  # (n_rows, heads, d_head) attended values before out-projection
    rows: torch.Tensor
    cols: torch.Tensor
    params: AttentionParams

    def nbytes(self) -> int:
        """Bytes held by tensors created by the forward pass (inputs excluded)."""
        owned = (self.q, self.k, self.v, self.weights, self.normalizers, self.heads)
        return sum(t.numel() * t.element_size() for t in owned)


@dataclass
class AttentionGrads:
    target: torch.Tensor
    source: torch.Tensor
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor


def _check_inputs(target, source, mask_rows, mask_cols, params):
    if target.ndim != 2 or source.ndim != 2:
        raise ValueError("features must be 2-D (positions x channels)")
    if target.shape[1] != params.d_model or source.shape[1] != params.d_model:
        raise ValueError("feature width does not match d_model")
    if target.shape[0] != mask_rows or source.shape[0] != mask_cols:
        raise ValueError(
            f"mask is {mask_rows}x{mask_cols} but features are {target.shape[0]}x{source.shape[0]}"
        )
    if not (torch.isfinite(target).all() and torch.isfinite(source).all()):
        raise ValueError("non-finite attention input")


def sparse_mha_forward(
    target: torch.Tensor,
    source: torch.Tensor,
    mask: SparseMask,
    params: AttentionParams,
    entries: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, AttentionCache]:
    """Attention of each target row over its masked source columns.

    ``entries`` optionally overrides the storage order of ``(rows, cols)``;
    it must describe the same set as ``mask``.
    """
    _check_inputs(target, source, mask.n_rows, mask.n_cols, params)
    rows, cols = entries if entries is not None else (mask.row_indices, mask.col_indices)
    n_rows, n_cols, h, dh = mask.n_rows, mask.n_cols, params.n_heads, params.d_head
    scale = 1.0 / math.sqrt(dh)
    q = (target @ params.w_q).view(n_rows, h, dh)
    k = (source @ params.w_k).view(n_cols, h, dh)
    v = (source @ params.w_v).view(n_cols, h, dh)

    logits = target.new_empty(rows.numel(), h)
    for s in range(0, rows.numel(), CHUNK_ENTRIES):
        r, c = rows[s : s + CHUNK_ENTRIES], cols[s : s + CHUNK_ENTRIES]
        logits[s : s + CHUNK_ENTRIES] = (q[r] * k[c]).sum(-1) * scale

    row_max = target.new_full((n_rows, h), -math.inf)
    row_max.scatter_reduce_(0, rows.unsqueeze(1).expand(-1, h), logits, reduce="amax")
    weights = torch.exp(logits - row_max[rows])
    normalizers = target.new_zeros(n_rows, h).index_add_(0, rows, weights)
    weights /= normalizers[rows]

    heads = target.new_zeros(n_rows, h, dh)
    for s in range(0, rows.numel(), CHUNK_ENTRIES):
        r, c = rows[s : s + CHUNK_ENTRIES], cols[s : s + CHUNK_ENTRIES]
        heads.index_add_(0, r, weights[s : s + CHUNK_ENTRIES].unsqueeze(-1) * v[c])
    out = heads.reshape(n_rows, h * dh) @ params.w_o
    cache = AttentionCache(target, source, q, k, v, weights, normalizers, heads, rows, cols, params)
    return out, cache


def sparse_mha_backward(cache: AttentionCache, grad_output: torch.Tensor) -> AttentionGrads:
    """Exact gradients of :func:`sparse_mha_forward` given ``dL/d(output)``.

    Softmax backward per entry is ``a * (dA - sum_row(a * dA))``; the row sum
    equals ``<d_heads[row], heads[row]>`` so it needs no second pass.
    """
    p = cache.params
    n_rows, h, dh = cache.heads.shape
    n_cols = cache.k.shape[0]
    if grad_output.shape != (n_rows, p.d_model):
        raise ValueError("grad_output shape does not match the cached forward")
    scale = 1.0 / math.sqrt(dh)
    heads_flat = cache.heads.reshape(n_rows, h * dh)
    grad_w_o = heads_flat.T @ grad_output
    d_heads = (grad_output @ p.w_o.T).view(n_rows, h, dh)
    row_dot = (d_heads * cache.heads).sum(-1)

    d_q = torch.zeros_like(cache.q)
    d_k = cache.k.new_zeros(n_cols, h, dh)
    d_v = cache.v.new_zeros(n_cols, h, dh)
    rows, cols, a = cache.rows, cache.cols, cache.weights
    for s in range(0, rows.numel(), CHUNK_ENTRIES):
        r, c = rows[s : s + CHUNK_ENTRIES], cols[s : s + CHUNK_ENTRIES]
        w = a[s : s + CHUNK_ENTRIES]
        dout_r = d_heads[r]
        d_v.index_add_(0, c, w.unsqueeze(-1) * dout_r)
        d_attn = (dout_r * cache.v[c]).sum(-1)
        d_logit = w * (d_attn - row_dot[r]) * scale
        d_q.index_add_(0, r, d_logit.unsqueeze(-1) * cache.k[c])
        d_k.index_add_(0, c, d_logit.unsqueeze(-1) * cache.q[r])

    d_q = d_q.reshape(n_rows, h * dh)
    d_k = d_k.reshape(n_cols, h * dh)
    d_v = d_v.reshape(n_cols, h * dh)
    return AttentionGrads(
        target=d_q @ p.w_q.T,
        source=d_k @ p.w_k.T + d_v @ p.w_v.T,
        w_q=cache.target.T @ d_q,
        w_k=cache.source.T @ d_k,
        w_v=cache.source.T @ d_v,
        w_o=grad_w_o,
    )


def dense_oracle_forward(
    target: torch.Tensor, source: torch.Tensor, dense_mask: torch.Tensor, params: AttentionParams
) -> torch.Tensor:
    """Reference masked attention on a materialized ``n_rows x n_cols`` logit matrix."""
    _check_inputs(target, source, dense_mask.shape[0], dense_mask.shape[1], params)
    n_rows, n_cols, h, dh = target.shape[0], source.shape[0], params.n_heads, params.d_head
    q = (target @ params.w_q).view(n_rows, h, dh).transpose(0, 1)
    k = (source @ params.w_k).view(n_cols, h, dh).transpose(0, 1)
    v = (source @ params.w_v).view(n_cols, h, dh).transpose(0, 1)
    logits = (q @ k.transpose(1, 2)) / math.sqrt(dh)
    logits = logits.masked_fill(~dense_mask.bool(), -math.inf)
    attn = torch.softmax(logits, dim=-1)
    empty = ~dense_mask.bool().any(dim=1)
    attn = attn.masked_fill(empty.view(1, -1, 1), 0.0)
    return (attn @ v).transpose(0, 1).reshape(n_rows, h * dh) @ params.w_o


class _SparseAttentionFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, target, source, w_q, w_k, w_v, w_o, mask, n_heads):
        out, cache = sparse_mha_forward(target, source, mask, AttentionParams(w_q, w_k, w_v, w_o, n_heads))
        ctx.cache = cache
        return out

    @staticmethod
    def backward(ctx, grad_output):
        g = sparse_mha_backward(ctx.cache, grad_output.contiguous())
        del ctx.cache
        return g.target, g.source, g.w_q, g.w_k, g.w_v, g.w_o, None, None


def sparse_attention(target, source, mask: SparseMask, w_q, w_k, w_v, w_o, n_heads: int) -> torch.Tensor:
    """Differentiable entry point backed by the hand-written backward."""
    return _SparseAttentionFunction.apply(target, source, w_q, w_k, w_v, w_o, mask, n_heads)


class SparseMultiheadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, zero_init_output: bool = True):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        std = d_model**-0.5
        self.w_q = nn.Parameter(torch.randn(d_model, d_model) * std)
        self.w_k = nn.Parameter(torch.randn(d_model, d_model) * std)
        self.w_v = nn.Parameter(torch.randn(d_model, d_model) * std)
        w_o = torch.zeros(d_model, d_model) if zero_init_output else torch.randn(d_model, d_model) * std
        self.w_o = nn.Parameter(w_o)

    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_o, self.n_heads)

    def forward(self, target: torch.Tensor, source: torch.Tensor, mask: SparseMask) -> torch.Tensor:
        return sparse_attention(target, source, mask, self.w_q, self.w_k, self.w_v, self.w_o, self.n_heads)
