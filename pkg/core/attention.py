"""
Attention mathematics: scaled dot-product logits, boundary-aware key selection,
local correlation, equidistant sampling and the sparse multihead layer

Selection masks are computed from the logit values only and are treated as
constants on the gradient tape; gradients reach the retained logits through
the masked softmax.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from config.constants import Constants
from utils.enums import AttentionMode
from . import numkit as nk
from .exceptions import ContractError, DimensionError
from .numkit import Tensor


ArrayOrTensor = Union[np.ndarray, Tensor]


def _values(matrix: ArrayOrTensor) -> np.ndarray:
    return matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix)


@dataclass(frozen=True)
class AttentionMask:
    """Per-(query, key) admissibility; budget 0 means unlimited, radius < 0 means no band"""

    allow: np.ndarray
    budget: int = 0
    radius: int = Constants.RADIUS_DISABLED

    @property
    def shape(self):
        return self.allow.shape

    def row_counts(self) -> np.ndarray:
        return self.allow.sum(axis=-1)

    @classmethod
    def full(cls, t_q: int, t_k: int) -> "AttentionMask":
        return cls(np.ones((t_q, t_k), dtype=bool))

    @classmethod
    def causal(cls, t: int) -> "AttentionMask":
        return cls(np.tril(np.ones((t, t), dtype=bool)))


@dataclass
class MultiheadParams:
    """Projections of one attention site; per-head slices of W_Q/W_K/W_V are d x d/h"""

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    heads: int

    def __post_init__(self):
        d = self.W_O.shape[0]
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            shape = getattr(self, name).shape
            if shape != (d, d):
                raise DimensionError("multihead_params", shape, (d, d), detail=f"{name} must be d x d")
        if self.heads < 1 or d % self.heads != 0:
            raise ContractError(f"heads ({self.heads}) must divide d ({d})")

    @property
    def d_model(self) -> int:
        return self.W_O.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class HeadTrace:
    """What one head did: post-softmax weights, final mask, selection-only mask"""

    weights: np.ndarray
    mask: np.ndarray
    selected: Optional[np.ndarray] = None
    margin: float = math.inf


@dataclass
class SiteTrace:
    """Heads of one attention site, in head order"""

    name: str
    heads: List[HeadTrace] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Logit transforms and masks
# ---------------------------------------------------------------------------


def scaled_logits(Q: Tensor, K: Tensor) -> Tensor:
    """P = Q K^T / sqrt(d_h)"""
    if Q.data.ndim != 2 or K.data.ndim != 2 or Q.shape[-1] != K.shape[-1]:
        raise DimensionError("scaled_logits", Q.shape, K.shape)
    return nk.scale(nk.matmul(Q, nk.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))


def boundary_gradient(P: ArrayOrTensor) -> np.ndarray:
    """Absolute discrete derivative along keys; column 0 keeps |P[i, 0]|"""
    values = _values(P)
    if values.ndim < 1 or values.shape[-1] < 1:
        raise DimensionError("boundary_gradient", values.shape, detail="needs at least one key")
    out = np.empty_like(values)
    out[..., 0] = np.abs(values[..., 0])
    out[..., 1:] = np.abs(np.diff(values, axis=-1))
    return out


def mixed_score(P: ArrayOrTensor, P_prime: ArrayOrTensor, alpha: float) -> np.ndarray:
    """alpha * P' + (1 - alpha) * P"""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    raw, derivative = _values(P), _values(P_prime)
    if raw.shape != derivative.shape:
        raise DimensionError("mixed_score", raw.shape, derivative.shape)
    if alpha == 1.0:
        return derivative.copy()
    if alpha == 0.0:
        return raw.copy()
    return alpha * derivative + (1.0 - alpha) * raw


def top_n_mask(S: ArrayOrTensor, n: int) -> AttentionMask:
    """Keep the n highest scores per row; ties keep the smallest column indices"""
    if n < 1:
        raise ContractError(f"top_n_mask: n must be >= 1, got {n}")
    scores = _values(S)
    keep = min(n, scores.shape[-1])
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :keep]
    allow = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(allow, order, True, axis=-1)
    return AttentionMask(allow, budget=n)


def selection_margin(S: ArrayOrTensor, n: int) -> float:
    """Smallest gap between the n-th and (n+1)-th score over all rows (inf when nothing is dropped)"""
    scores = _values(S)
    if n >= scores.shape[-1]:
        return math.inf
    ordered = -np.sort(-scores, axis=-1)
    return float(np.min(ordered[..., n - 1] - ordered[..., n]))


def local_mask(t_q: int, t_k: int, r: int) -> AttentionMask:
    """Band |i - j| <= r"""
    if r < 0:
        raise ContractError(f"local_mask: radius must be >= 0, got {r}")
    rows = np.arange(t_q)[:, None]
    cols = np.arange(t_k)[None, :]
    return AttentionMask(np.abs(rows - cols) <= r, radius=r)


def union_mask(a: AttentionMask, b: AttentionMask) -> AttentionMask:
    if a.shape != b.shape:
        raise DimensionError("union_mask", a.shape, b.shape)
    return AttentionMask(a.allow | b.allow, budget=max(a.budget, b.budget), radius=max(a.radius, b.radius))


def intersect_mask(a: AttentionMask, b: AttentionMask) -> AttentionMask:
    if a.shape != b.shape:
        raise DimensionError("intersect_mask", a.shape, b.shape)
    return AttentionMask(a.allow & b.allow, budget=a.budget, radius=a.radius)


def equidistant_columns(t_k: int, n: int) -> List[int]:
    """round_half_up(k (T_k - 1) / (n - 1)) for k = 0..n-1"""
    if not 1 <= n <= t_k:
        raise ContractError(f"equidistant_mask: need 1 <= n <= T_k, got n={n}, T_k={t_k}")
    if n == 1:
        return [0]
    span = t_k - 1
    return [(2 * k * span + (n - 1)) // (2 * (n - 1)) for k in range(n)]


def equidistant_mask(t_k: int, n: int, t_q: int = 1) -> AttentionMask:
    """Same uniformly spaced key columns for every query row"""
    allow = np.zeros((t_q, t_k), dtype=bool)
    allow[:, equidistant_columns(t_k, n)] = True
    return AttentionMask(allow, budget=n)


# ---------------------------------------------------------------------------
# Multihead layer
# ---------------------------------------------------------------------------


def _check_flags(mode: AttentionMode, n: Optional[int], alpha: Optional[float], r: int):
    if mode != AttentionMode.BOUNDARY:
        if alpha is not None:
            raise ContractError(f"alpha is only valid with boundary mode, got mode={mode.value}")
        if r >= 0:
            raise ContractError(f"local radius is only valid with boundary mode, got mode={mode.value}")
    if mode == AttentionMode.BOUNDARY and alpha is None:
        raise ContractError("boundary mode needs alpha")
    if mode != AttentionMode.VANILLA and (n is None or n < 1):
        raise ContractError(f"{mode.value} mode needs a budget n >= 1, got {n}")


def head_mask(P: Tensor, mode: AttentionMode, n: Optional[int], alpha: Optional[float],
              r: int) -> Tuple[AttentionMask, Optional[AttentionMask], float]:
    """Mask for one head's logits plus the selection-only part and its tie margin"""
    t_q, t_k = P.shape
    if mode == AttentionMode.BOUNDARY:
        scores = mixed_score(P.data, boundary_gradient(P.data), alpha)
        selected = top_n_mask(scores, n)
        margin = selection_margin(scores, min(n, t_k))
        mask = selected if r < 0 else union_mask(selected, local_mask(t_q, t_k, r))
        return mask, selected, margin
    if mode == AttentionMode.EQUIDISTANT:
        selected = equidistant_mask(t_k, min(n, t_k), t_q)
        return selected, selected, math.inf
    return AttentionMask.full(t_q, t_k), None, math.inf


def sparse_multihead(q_in: Tensor, k_in: Tensor, v_in: Tensor, params: MultiheadParams,
                     mode: AttentionMode = AttentionMode.VANILLA, n: Optional[int] = None,
                     alpha: Optional[float] = None, r: int = Constants.RADIUS_DISABLED,
                     extra_mask: Optional[AttentionMask] = None,
                     trace: Optional[SiteTrace] = None) -> Tensor:
    """Multihead attention with per-head key selection

    Args:
        q_in: queries, T_q x d
        k_in: keys, T_k x d
        v_in: values, T_k x d
        params: projections of this site
        mode: vanilla (all keys), boundary (top-n of the mixed score, optional local band)
            or equidistant (uniformly spaced keys)
        n: selection budget, clamped to T_k
        alpha: mixing coefficient, boundary mode only
        r: local radius, boundary mode only (negative disables)
        extra_mask: AND-ed into every head's mask (causal masking)
        trace: when given, receives one HeadTrace per head

    Returns:
        T_q x d output after the W_O projection
    """
    mode = AttentionMode(mode)
    _check_flags(mode, n, alpha, r)
    d = params.d_model
    for name, tensor in (("queries", q_in), ("keys", k_in), ("values", v_in)):
        if tensor.data.ndim != 2 or tensor.shape[1] != d:
            raise DimensionError("sparse_multihead", tensor.shape, (d,), detail=f"{name} must be T x {d}")
    if k_in.shape[0] != v_in.shape[0]:
        raise DimensionError("sparse_multihead", k_in.shape, v_in.shape, detail="keys and values must share T_k")
    t_q, t_k = q_in.shape[0], k_in.shape[0]
    if extra_mask is not None and extra_mask.shape != (t_q, t_k):
        raise DimensionError("sparse_multihead", extra_mask.shape, (t_q, t_k), detail="extra mask")

    Q = nk.matmul(q_in, params.W_Q)
    K = nk.matmul(k_in, params.W_K)
    V = nk.matmul(v_in, params.W_V)
    width = params.head_dim

    heads = []
    for h in range(params.heads):
        lo, hi = h * width, (h + 1) * width
        P = scaled_logits(nk.slice_cols(Q, lo, hi), nk.slice_cols(K, lo, hi))
        mask, selected, margin = head_mask(P, mode, n, alpha, r)
        if extra_mask is not None:
            mask = intersect_mask(mask, extra_mask)
        weights = nk.softmax(P, mask.allow)
        heads.append(nk.matmul(weights, nk.slice_cols(V, lo, hi)))
        if trace is not None:
            trace.heads.append(HeadTrace(
                weights=weights.data.copy(),
                mask=mask.allow.copy(),
                selected=None if selected is None else selected.allow.copy(),
                margin=margin,
            ))

    merged = heads[0] if len(heads) == 1 else nk.concat(heads, axis=-1)
    return nk.matmul(merged, params.W_O)


def hierarchical_attention(q_in: Tensor, first: Tensor, second: Tensor, params: MultiheadParams,
                           trace: Optional[SiteTrace] = None) -> Tensor:
    """Row i of q_in attends over the two-row context [first[i]; second[i]]

    Used by the decoder to fuse the per-step image and motion context vectors.
    """
    if not (q_in.shape == first.shape == second.shape) or q_in.data.ndim != 2:
        raise DimensionError("hierarchical_attention", q_in.shape, first.shape, second.shape)
    if q_in.shape[1] != params.d_model:
        raise DimensionError("hierarchical_attention", q_in.shape, (params.d_model,))

    Q = nk.matmul(q_in, params.W_Q)
    keys = (nk.matmul(first, params.W_K), nk.matmul(second, params.W_K))
    values = (nk.matmul(first, params.W_V), nk.matmul(second, params.W_V))
    width = params.head_dim
    inv_sqrt = 1.0 / math.sqrt(width)

    heads = []
    for h in range(params.heads):
        lo, hi = h * width, (h + 1) * width
        q = nk.slice_cols(Q, lo, hi)
        logits = nk.concat([nk.scale(nk.sum_rows(nk.mul(q, nk.slice_cols(k, lo, hi))), inv_sqrt)
                            for k in keys], axis=-1)
        weights = nk.softmax(logits)
        head = nk.add(nk.mul(nk.slice_cols(weights, 0, 1), nk.slice_cols(values[0], lo, hi)),
                      nk.mul(nk.slice_cols(weights, 1, 2), nk.slice_cols(values[1], lo, hi)))
        heads.append(head)
        if trace is not None:
            trace.heads.append(HeadTrace(weights=weights.data.copy(), mask=np.ones(weights.shape, dtype=bool)))

    merged = heads[0] if len(heads) == 1 else nk.concat(heads, axis=-1)
    return nk.matmul(merged, params.W_O)
