"""
Attention module for the SLAB transformer toolkit.

Implements multi-head softmax attention (the quadratic baseline) and
simplified linear attention (SLA): ReLU feature maps on queries and keys,
evaluated in the K^T V-first order so cost grows linearly with the token
count, plus a depth-wise convolution of V over the token grid as a local
enhancement branch. A float64 reference evaluates SLA in the naive quadratic
order with explicit convolution loops, and a rank diagnostic measures the
numerical rank of attention maps.
"""

import math
import logging
from dataclasses import dataclass
from typing import Any, Optional, Tuple, Union

import numpy as np

from tensor_core import (
    Tensor, ShapeMismatch, depthwise_conv2d, is_grad_enabled, relu, softmax_lastdim,
)

logger = logging.getLogger(__name__)

DEFAULT_EPS_DENOM = 1e-6
QUERY_CHUNK = 1024


class GridMismatch(ValueError):
    """Raised when a token grid does not match the token count of the input."""
    pass


@dataclass(frozen=True)
class TokenGrid:
    """Spatial layout (height x width) of the token sequence."""
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise GridMismatch(f"Grid extents must be positive, got {self.height}x{self.width}")

    @property
    def tokens(self) -> int:
        return self.height * self.width

    def check(self, n_tokens: int) -> None:
        if n_tokens != self.tokens:
            raise GridMismatch(f"Grid {self.height}x{self.width} holds {self.tokens} tokens, input has {n_tokens}")

    @classmethod
    def for_tokens(cls, n_tokens: int) -> "TokenGrid":
        """Most square grid holding exactly ``n_tokens`` tokens."""
        if n_tokens <= 0:
            raise GridMismatch(f"Token count must be positive, got {n_tokens}")
        height = int(math.isqrt(n_tokens))
        while n_tokens % height:
            height -= 1
        return cls(height, n_tokens // height)


@dataclass
class AttentionParams:
    """
    Projections and depth-wise kernel of one attention layer.

    Weights are (C, C) and applied as ``x @ w + b``. The biases are kept
    separate so an eval-mode BatchNorm in front of the layer can be folded
    into them.
    """
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    b_o: Tensor
    dwc_kernel: Tensor
    heads: int
    eps_denom: float = DEFAULT_EPS_DENOM

    @classmethod
    def init(cls, dim: int, heads: int, kernel_size: int = 3, rng: Optional[np.random.Generator] = None,
             dtype: Any = np.float32, eps_denom: float = DEFAULT_EPS_DENOM) -> "AttentionParams":
        """Random initialization with std 1/sqrt(dim) projections and a small random kernel."""
        rng = rng or np.random.default_rng(0)
        std = 1.0 / math.sqrt(dim)

        def weight():
            return Tensor(rng.normal(0.0, std, (dim, dim)).astype(dtype), requires_grad=True)

        def bias():
            return Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

        kernel = rng.normal(0.0, 0.1, (dim, kernel_size, kernel_size)).astype(dtype)
        params = cls(
            w_q=weight(), w_k=weight(), w_v=weight(), w_o=weight(),
            b_q=bias(), b_k=bias(), b_v=bias(), b_o=bias(),
            dwc_kernel=Tensor(kernel, requires_grad=True),
            heads=heads, eps_denom=eps_denom,
        )
        params.validate()
        return params

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def validate(self) -> None:
        c = self.dim
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (c, c):
                raise ShapeMismatch(f"{name} must have shape ({c}, {c}), got {getattr(self, name).shape}")
        for name in ("b_q", "b_k", "b_v", "b_o"):
            if getattr(self, name).shape != (c,):
                raise ShapeMismatch(f"{name} must have shape ({c},), got {getattr(self, name).shape}")
        if self.heads <= 0 or c % self.heads:
            raise ShapeMismatch(f"Channel count {c} is not divisible by {self.heads} heads")
        k = self.dwc_kernel.shape
        if len(k) != 3 or k[0] != c or k[1] != k[2] or k[1] % 2 == 0:
            raise ShapeMismatch(f"dwc_kernel must have shape ({c}, k, k) with odd k, got {k}")


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise ShapeMismatch(f"Attention input must be (N, C) or (B, N, C), got {x.shape}")
    return x, False


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return t.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, d = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def _qkv(x: Tensor, p: AttentionParams) -> Tuple[Tensor, Tensor, Tensor]:
    if x.shape[-1] != p.dim:
        raise ShapeMismatch(f"Attention expects feature width {p.dim}, got input {x.shape}")
    return x @ p.w_q + p.b_q, x @ p.w_k + p.b_k, x @ p.w_v + p.b_v


def _softmax_mix(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    return softmax_lastdim(scores) @ v


def softmax_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """
    Multi-head scaled dot-product attention followed by the output projection.

    Without gradient recording, queries are processed in chunks of
    ``QUERY_CHUNK`` rows so the score buffer stays O(chunk * N).

    Args:
        x: Tokens of shape (N, C) or (B, N, C)
        p: Attention parameters

    Returns:
        Tensor with the shape of ``x``
    """
    x, squeeze = _batched(x)
    q, k, v = _qkv(x, p)
    q, k, v = _split_heads(q, p.heads), _split_heads(k, p.heads), _split_heads(v, p.heads)
    scale = 1.0 / math.sqrt(p.head_dim)

    n = q.shape[2]
    if is_grad_enabled() or n <= QUERY_CHUNK:
        mixed = _softmax_mix(q, k, v, scale)
    else:
        parts = []
        for start in range(0, n, QUERY_CHUNK):
            q_chunk = Tensor(q.data[:, :, start:start + QUERY_CHUNK])
            parts.append(_softmax_mix(q_chunk, k, v, scale).data)
        mixed = Tensor(np.concatenate(parts, axis=2))

    out = _merge_heads(mixed) @ p.w_o + p.b_o
    return out.reshape(out.shape[1:]) if squeeze else out


def _dwc_tokens(v: Tensor, kernel: Tensor, grid: TokenGrid) -> Tensor:
    """Depth-wise convolution of (B, N, C) tokens laid out on ``grid``."""
    b, n, c = v.shape
    spatial = v.transpose(0, 2, 1).reshape(b, c, grid.height, grid.width)
    return depthwise_conv2d(spatial, kernel).reshape(b, c, n).transpose(0, 2, 1)


def sla_attention(x: Tensor, p: AttentionParams, grid: TokenGrid) -> Tensor:
    """
    Simplified linear attention with depth-wise convolution enhancement.

    Per head: ``ReLU(Q) (ReLU(K)^T V) / (ReLU(Q) sum_j ReLU(K_j)^T + eps)``.
    The keys-values product is formed first, so cost is O(N d^2) per head.
    A query row whose kernel similarity vanishes contributes 0 from the
    attention branch. The convolution runs once over all C channels of V.

    Args:
        x: Tokens of shape (N, C) or (B, N, C)
        p: Attention parameters
        grid: Spatial layout of the N tokens

    Returns:
        Tensor with the shape of ``x``

    Raises:
        GridMismatch: If the grid does not hold N tokens
    """
    x, squeeze = _batched(x)
    grid.check(x.shape[1])
    q, k, v = _qkv(x, p)

    qh = _split_heads(relu(q), p.heads)
    kh = _split_heads(relu(k), p.heads)
    vh = _split_heads(v, p.heads)

    kv = kh.transpose(0, 1, 3, 2) @ vh
    k_sum = kh.sum(axis=2, keepdims=True)
    numerator = qh @ kv
    denominator = qh @ k_sum.transpose(0, 1, 3, 2)
    attended = _merge_heads(numerator / (denominator + p.eps_denom))

    out = (attended + _dwc_tokens(v, p.dwc_kernel, grid)) @ p.w_o + p.b_o
    return out.reshape(out.shape[1:]) if squeeze else out


def sla_naive_oracle(x: Union[Tensor, np.ndarray], p: AttentionParams, grid: TokenGrid) -> Tensor:
    """
    Reference SLA in float64: explicit N x N similarity per head and a
    loop-based depth-wise convolution. Shares nothing with ``sla_attention``
    beyond the parameters.
    """
    xs = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    squeeze = xs.ndim == 2
    if squeeze:
        xs = xs[None]
    grid.check(xs.shape[1])

    def f64(t: Tensor) -> np.ndarray:
        return t.data.astype(np.float64)

    q = xs @ f64(p.w_q) + f64(p.b_q)
    k = xs @ f64(p.w_k) + f64(p.b_k)
    v = xs @ f64(p.w_v) + f64(p.b_v)
    kernel = f64(p.dwc_kernel)
    batch, n, c = xs.shape
    d = c // p.heads
    ksize = kernel.shape[1]
    pad = ksize // 2

    out = np.zeros_like(xs)
    for bi in range(batch):
        for h in range(p.heads):
            cols = slice(h * d, (h + 1) * d)
            qf = np.maximum(q[bi, :, cols], 0.0)
            kf = np.maximum(k[bi, :, cols], 0.0)
            sim = qf @ kf.T
            for i in range(n):
                out[bi, i, cols] = sim[i] @ v[bi, :, cols] / (sim[i].sum() + p.eps_denom)

        # tokens are laid out row-major on the grid
        image = v[bi].T.reshape(c, grid.height, grid.width)
        conv = np.zeros_like(image)
        for ch in range(c):
            for r in range(grid.height):
                for col in range(grid.width):
                    acc = 0.0
                    for u in range(ksize):
                        for w in range(ksize):
                            rr, cc = r + u - pad, col + w - pad
                            if 0 <= rr < grid.height and 0 <= cc < grid.width:
                                acc += kernel[ch, u, w] * image[ch, rr, cc]
                    conv[ch, r, col] = acc
        out[bi] += conv.reshape(c, n).T

    out = out @ f64(p.w_o) + f64(p.b_o)
    return Tensor(out[0] if squeeze else out, dtype=np.float64)


def sla_similarity(x: Union[Tensor, np.ndarray], p: AttentionParams) -> np.ndarray:
    """Per-head ReLU(Q) ReLU(K)^T maps of an (N, C) input, shape (h, N, N)."""
    xs = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    q = np.maximum(xs @ p.w_q.data + p.b_q.data, 0.0)
    k = np.maximum(xs @ p.w_k.data + p.b_k.data, 0.0)
    d = p.head_dim
    return np.stack([q[:, h * d:(h + 1) * d] @ k[:, h * d:(h + 1) * d].T for h in range(p.heads)])


def softmax_attention_map(x: Union[Tensor, np.ndarray], p: AttentionParams) -> np.ndarray:
    """Per-head row-stochastic softmax attention maps of an (N, C) input, shape (h, N, N)."""
    xs = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    q = xs @ p.w_q.data + p.b_q.data
    k = xs @ p.w_k.data + p.b_k.data
    d = p.head_dim
    maps = []
    for h in range(p.heads):
        scores = q[:, h * d:(h + 1) * d] @ k[:, h * d:(h + 1) * d].T / math.sqrt(d)
        scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
        maps.append(scores / scores.sum(axis=-1, keepdims=True))
    return np.stack(maps)


def attention_map_rank(sim: Union[Tensor, np.ndarray], tol: float = 1e-8) -> int:
    """
    Numerical rank: number of singular values above ``tol * s_max``.

    Args:
        sim: Square (N, N) attention or similarity map
        tol: Relative singular-value threshold

    Returns:
        Integer rank; 0 for an all-zero map
    """
    matrix = np.asarray(sim.data if isinstance(sim, Tensor) else sim, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeMismatch(f"attention_map_rank needs a 2-D map, got {matrix.shape}")
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular.size == 0 or singular[0] == 0.0:
        return 0
    return int(np.sum(singular > tol * singular[0]))
