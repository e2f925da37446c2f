"""Multi-head self-attention over a 2D feature map with relative position logits.

For a query pixel (i, j) and key pixel (a, b) each head scores

    q_ij . k_ab + q_ij . (r_h[a - i] + r_w[b - j])

softmaxes over all keys and aggregates the values.  The row and column
offset tables are shared by the heads.  Tables are sized for a maximum
extent chosen at construction, so the learnable-parameter count does not
depend on the size of the map the layer is applied to.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import Module, Shape, parameter, param_count
from .tensor import ContractError, Tensor

__all__ = ["OffsetGrid", "relative_offsets", "MHSA", "mhsa_forward", "param_count"]


@dataclass(frozen=True)
class OffsetGrid:
    """Row and column offsets ``a - i`` and ``b - j`` for every (query, key) pixel pair.

    Pixels are numbered row-major, so entry ``[n, m]`` pairs query ``n = i*W + j``
    with key ``m = a*W + b``.
    """

    height: int
    width: int
    rows: np.ndarray
    cols: np.ndarray

    def row_index(self, extent: int | None = None) -> np.ndarray:
        """Positions of the row offsets in a table covering ``[-(extent-1), extent-1]``."""
        return self.rows + (self.height if extent is None else extent) - 1

    def col_index(self, extent: int | None = None) -> np.ndarray:
        return self.cols + (self.width if extent is None else extent) - 1


def relative_offsets(height: int, width: int) -> OffsetGrid:
    if height < 1 or width < 1:
        raise ContractError(f"extents must be >= 1, got {height}x{width}")
    i, j = np.divmod(np.arange(height * width), width)
    rows = i[None, :] - i[:, None]
    cols = j[None, :] - j[:, None]
    return OffsetGrid(height, width, rows, cols)


@lru_cache(maxsize=32)
def _selectors(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    # one-hot [N, 2H-1, N] / [N, 2W-1, N]: picks the offset-table logit for each key
    grid = relative_offsets(height, width)
    n = height * width
    sel_h = np.zeros((n, 2 * height - 1, n))
    sel_w = np.zeros((n, 2 * width - 1, n))
    q, k = np.indices((n, n))
    sel_h[q, grid.row_index(), k] = 1.0
    sel_w[q, grid.col_index(), k] = 1.0
    return sel_h, sel_w


class MHSA(Module):
    """Global multi-head self-attention with 2D relative position encoding.

    ``extent`` is the largest (H, W) the layer accepts.  With ``eq1_literal``
    the logits are left unscaled; otherwise they are divided by
    sqrt(head width).  Heads are concatenated and mixed by a learnable
    pointwise projection.
    """

    def __init__(self, dim: int, heads: int = 4, extent=(14, 14), *, rng, dtype="fp32", eq1_literal=False):
        super().__init__()
        if dim % heads:
            raise ContractError(f"heads={heads} must divide dim={dim}")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.extent = (extent, extent) if isinstance(extent, int) else tuple(extent)
        self.eq1_literal = eq1_literal
        std = 1.0 / np.sqrt(dim)
        self.w_q = parameter(rng.normal(0.0, std, (dim, dim)), dtype)
        self.w_k = parameter(rng.normal(0.0, std, (dim, dim)), dtype)
        self.w_v = parameter(rng.normal(0.0, std, (dim, dim)), dtype)
        self.w_o = parameter(rng.normal(0.0, std, (dim, dim)), dtype)
        self.rel_h = parameter(rng.normal(0.0, 0.02, (2 * self.extent[0] - 1, self.head_dim)), dtype)
        self.rel_w = parameter(rng.normal(0.0, 0.02, (2 * self.extent[1] - 1, self.head_dim)), dtype)

    def out_shape(self, shape: Shape) -> Shape:
        c, h, w = shape
        if c != self.dim:
            raise ContractError(f"MHSA expects {self.dim} channels, got {c}")
        if h > self.extent[0] or w > self.extent[1]:
            raise ContractError(f"MHSA offset tables cover {self.extent}, input is {h}x{w}")
        return shape

    def _heads(self, x: Tensor, w: Tensor, B: int, N: int) -> Tensor:
        y = T.einsum("bnc,cd->bnd", x, w).reshape(B, N, self.heads, self.head_dim)
        return y.transpose(0, 2, 1, 3)

    def attention_logits(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Pre-softmax logits ``[B, heads, N, N]`` and the value tensor ``[B, heads, N, d]``."""
        B, C, H, W = x.shape
        self.out_shape((C, H, W))
        N = H * W
        tokens = x.reshape(B, C, N).transpose(0, 2, 1)
        q = self._heads(tokens, self.w_q, B, N)
        k = self._heads(tokens, self.w_k, B, N)
        v = self._heads(tokens, self.w_v, B, N)
        if not self.eq1_literal:
            q = q * (self.head_dim ** -0.5)
        sel_h, sel_w = _selectors(H, W)
        eh, ew = self.extent
        r_h = self.rel_h[eh - H : eh + H - 1]
        r_w = self.rel_w[ew - W : ew + W - 1]
        content = T.einsum("bhnd,bhmd->bhnm", q, k)
        pos_h = T.einsum("bhnl,nlm->bhnm", T.einsum("bhnd,ld->bhnl", q, r_h), Tensor(sel_h, dtype=q.dtype))
        pos_w = T.einsum("bhnl,nlm->bhnm", T.einsum("bhnd,ld->bhnl", q, r_w), Tensor(sel_w, dtype=q.dtype))
        return content + pos_h + pos_w, v

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        logits, v = self.attention_logits(x)
        attn = T.softmax(logits)
        y = T.einsum("bhnm,bhmd->bhnd", attn, v).transpose(0, 2, 1, 3).reshape(B, H * W, C)
        y = T.einsum("bnc,cd->bnd", y, self.w_o)
        return y.transpose(0, 2, 1).reshape(B, C, H, W)


def mhsa_forward(layer: MHSA, x: Tensor) -> Tensor:
    return layer(x)
