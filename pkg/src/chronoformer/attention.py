"""Scaled dot-product attention, multi-head attention and sparse variants.

Shapes follow the feature-by-position convention: queries and keys are
``s1 x n``, values ``s x n``.  Stacked heads live on an extra axis just in
front of the matrix axes, e.g. queries for ``r`` heads are ``(..., r, s1, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TextIO

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, MaskError
from .tensor import Tensor

MASKED_LOGIT = -1e30

LOGSPARSE_KINDS = ("logsparse", "logsparse_local", "logsparse_restart")
MASK_KINDS = ("full", "causal", "restricted") + LOGSPARSE_KINDS


@dataclass(frozen=True)
class AttentionMask:
    """Which key positions (columns) each query position (row) may see."""

    allowed: np.ndarray
    kind: str = "full"

    def __post_init__(self):
        allowed = np.asarray(self.allowed, dtype=bool)
        if allowed.ndim != 2:
            raise MaskError(f"mask must be 2-D, got shape {allowed.shape}")
        empty = np.flatnonzero(~allowed.any(axis=1))
        if empty.size:
            raise MaskError(f"mask rows {empty.tolist()} allow no key positions")
        allowed.setflags(write=False)
        object.__setattr__(self, "allowed", allowed)

    @property
    def length(self) -> int:
        return self.allowed.shape[0]

    @property
    def is_full(self) -> bool:
        return bool(self.allowed.all())

    def count(self) -> int:
        return int(self.allowed.sum())

    def bias(self) -> np.ndarray:
        """Additive logit offsets: 0 where allowed, a huge negative elsewhere."""
        return np.where(self.allowed, 0.0, MASKED_LOGIT)

    def write_csv(self, fh: TextIO) -> None:
        n_cols = self.allowed.shape[1]
        fh.write(",".join(str(j) for j in range(n_cols)) + "\n")
        for row in self.allowed:
            fh.write(",".join("1" if v else "0" for v in row) + "\n")


def full_mask(n: int, n_keys: int | None = None) -> AttentionMask:
    return AttentionMask(np.ones((n, n if n_keys is None else n_keys), dtype=bool), "full")


def causal_mask(n: int) -> AttentionMask:
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)), "causal")


def restricted_mask(n: int, window: int) -> AttentionMask:
    """Each position sees itself and the ``window`` positions before it."""
    if window < 0:
        raise ConfigError(f"restricted window must be >= 0, got {window}")
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return AttentionMask((j <= i) & (j >= i - window), f"restricted({window})")


def build_logsparse_mask(
    n: int, kind: str = "logsparse", window: int = 4, block: int | None = None
) -> AttentionMask:
    """LogSparse patterns: self plus past positions at offsets 1, 2, 4, 8, ...

    ``logsparse_local`` adds the ``window`` nearest past positions densely;
    ``logsparse_restart`` restarts the exponential offsets at the start of
    every block of ``block`` positions and never looks past that start.
    """
    if n < 1:
        raise ConfigError(f"mask length must be >= 1, got {n}")
    if kind not in LOGSPARSE_KINDS:
        raise ConfigError(f"unknown logsparse kind {kind!r}; expected one of {LOGSPARSE_KINDS}")
    if window < 0:
        raise ConfigError(f"logsparse_local window must be >= 0, got {window}")
    if kind == "logsparse_restart":
        if block is None or block < 1:
            raise ConfigError(f"logsparse_restart needs block >= 1, got {block}")
    allowed = np.zeros((n, n), dtype=bool)
    for i in range(n):
        floor = (i // block) * block if kind == "logsparse_restart" else 0
        allowed[i, i] = True
        step = 1
        while i - step >= floor:
            allowed[i, i - step] = True
            step *= 2
        if kind == "logsparse_local":
            allowed[i, max(0, i - window) : i] = True
    return AttentionMask(allowed, kind)


def build_mask(kind: str, n: int, window: int = 4, block: int | None = None) -> AttentionMask:
    """Dispatch on a mask kind name (see ``MASK_KINDS``)."""
    if kind == "full":
        return full_mask(n)
    if kind == "causal":
        return causal_mask(n)
    if kind == "restricted":
        return restricted_mask(n, window)
    if kind in LOGSPARSE_KINDS:
        return build_logsparse_mask(n, kind, window=window, block=block)
    raise ConfigError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")


@dataclass
class CostCounter:
    """Counts query-key dot products and attention weights materialised."""

    dot_products: int = 0
    weights_stored: int = 0
    peak_weights_stored: int = 0

    def record(self, dots: int, stored: int, peak: int) -> None:
        self.dot_products += int(dots)
        self.weights_stored += int(stored)
        self.peak_weights_stored = max(self.peak_weights_stored, int(peak))

    def merge(self, other: CostCounter) -> None:
        self.record(other.dot_products, other.weights_stored, other.peak_weights_stored)


@dataclass
class MultiHeadParams:
    """Stacked per-head projections.

    ``wq``/``wk`` are ``(r, s1, d)`` for canonical attention or
    ``(r, s1, d, k)`` when queries and keys come from a causal convolution;
    ``wv`` is ``(r, s, d)`` and ``wo`` is ``(d, r * s)``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def __post_init__(self):
        r, s1, d = self.wq.shape[:3]
        if self.wk.shape != self.wq.shape:
            raise DimensionError(f"wq {self.wq.shape} and wk {self.wk.shape} differ")
        if self.wv.ndim != 3 or self.wv.shape[0] != r or self.wv.shape[2] != d:
            raise DimensionError(f"wv {self.wv.shape} incompatible with wq {self.wq.shape}")
        s = self.wv.shape[1]
        if self.wo.shape != (d, r * s):
            raise DimensionError(f"wo must be ({d}, {r * s}), got {self.wo.shape}")

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def kernel(self) -> int:
        return self.wq.shape[3] if self.wq.ndim == 4 else 1

    def tensors(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


@dataclass(frozen=True)
class ProbSparse:
    """Settings for ProbSparse query selection.

    ``u`` defaults to ``ceil(factor * ln n)`` clipped to ``[1, n]``.
    """

    u: int | None = None
    factor: float = 5.0
    seed: int = 0

    def active_queries(self, n: int) -> int:
        if self.u is not None:
            return self.u
        return min(n, max(1, math.ceil(self.factor * math.log(n))))

    def sample_size(self, n: int) -> int:
        return max(1, math.ceil(self.factor * math.log(n))) if n > 1 else 1


def _check_mask(mask: AttentionMask | None, n_q: int, n_k: int) -> AttentionMask | None:
    if mask is None:
        return None
    if mask.allowed.shape != (n_q, n_k):
        raise MaskError(f"mask shape {mask.allowed.shape} does not match {n_q} queries x {n_k} keys")
    return mask


def scaled_dot_product_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: AttentionMask | None = None,
    counter: CostCounter | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """``Z = V softmax(Q^T K / sqrt(s1))^T`` with disallowed logits suppressed.

    ``mask=None`` means every query sees every key (also for rectangular
    cross-attention).  Output is ``(..., s, n_queries)``.
    """
    if Q.shape[-2] != K.shape[-2]:
        raise DimensionError(f"query size {Q.shape[-2]} != key size {K.shape[-2]}")
    if K.shape[-1] != V.shape[-1]:
        raise DimensionError(f"{K.shape[-1]} keys but {V.shape[-1]} values")
    n_q, n_k = Q.shape[-1], K.shape[-1]
    mask = _check_mask(mask, n_q, n_k)
    s1 = Q.shape[-2]
    logits = T.scale(T.matmul(T.transpose(Q), K), 1.0 / math.sqrt(s1))
    if mask is not None and not mask.is_full:
        logits = T.add(logits, mask.bias())
    weights = T.softmax_rows(logits)
    if counter is not None:
        allowed = n_q * n_k if mask is None else mask.count()
        lead = math.prod(np.broadcast_shapes(Q.shape[:-2], K.shape[:-2], V.shape[:-2]))
        counter.record(lead * allowed, lead * allowed, allowed)
    if weights_out is not None:
        weights_out.append(weights.values)
    return T.matmul(V, T.transpose(weights))


def probsparse_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: AttentionMask | None = None,
    u: int | None = None,
    seed: int = 0,
    counter: CostCounter | None = None,
    factor: float = 5.0,
    weights_out: list | None = None,
) -> Tensor:
    """Attention where only the ``u`` most "peaked" queries attend.

    Each query is scored on a seeded sample of its allowed keys by
    ``max(logit) - mean(logit)``; the top ``u`` (ties to the lower index)
    get full softmax attention.  Every other query behaves like a zero
    vector, so its output is the plain mean of its allowed value columns.
    """
    n_q, n_k = Q.shape[-1], K.shape[-1]
    mask = _check_mask(mask, n_q, n_k)
    allowed = np.ones((n_q, n_k), dtype=bool) if mask is None else mask.allowed
    spec = ProbSparse(u=u, factor=factor, seed=seed)
    u = spec.active_queries(n_q)
    if not 1 <= u <= n_q:
        raise ConfigError(f"probsparse u must be in [1, {n_q}], got {u}")
    s1 = Q.shape[-2]
    inv_sqrt = 1.0 / math.sqrt(s1)
    lead_shape = np.broadcast_shapes(Q.shape[:-2], K.shape[:-2], V.shape[:-2])
    lead = math.prod(lead_shape)

    # sample keys uniformly (with replacement) from each query's allowed set
    n_sample = spec.sample_size(n_k)
    rng = np.random.default_rng(seed)
    counts = allowed.sum(axis=1)
    rows, cols = np.nonzero(allowed)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    draws = rng.random(lead_shape + (n_q, n_sample))
    pick = starts[:, None] + np.floor(draws * counts[:, None]).astype(np.intp)
    sampled = cols[pick]  # (..., n_q, n_sample)

    q = np.broadcast_to(Q.values, lead_shape + Q.shape[-2:])
    k = np.broadcast_to(K.values, lead_shape + K.shape[-2:])
    k_t = np.swapaxes(k, -1, -2)  # (..., n_k, s1)
    k_sampled = np.take_along_axis(k_t[..., None, :, :], sampled[..., None], axis=-2)
    q_t = np.swapaxes(q, -1, -2)  # (..., n_q, s1)
    sample_logits = np.einsum("...qs,...qms->...qm", q_t, k_sampled) * inv_sqrt
    score = sample_logits.max(axis=-1) - sample_logits.mean(axis=-1)

    order = np.argsort(-score, axis=-1, kind="stable")
    selected = np.sort(order[..., :u], axis=-1)  # (..., u)

    onehot = np.zeros(lead_shape + (n_q, u))
    np.put_along_axis(onehot, selected[..., None, :], 1.0, axis=-2)
    is_selected = onehot.sum(axis=-1) > 0  # (..., n_q)

    q_sel = T.matmul(Q, onehot)  # (..., s1, u)
    logits = T.scale(T.matmul(T.transpose(q_sel), K), inv_sqrt)  # (..., u, n_k)
    if not allowed.all():
        logits = T.add(logits, np.where(allowed, 0.0, MASKED_LOGIT)[selected])
    w_sel = T.softmax_rows(logits)
    uniform = allowed / counts[:, None]
    lazy = np.where(is_selected[..., None], 0.0, uniform)
    weights = T.add(T.matmul(onehot, w_sel), lazy)  # (..., n_q, n_k)

    if counter is not None:
        active = counts[selected].sum(axis=-1)  # attended keys per (batch, head)
        total = int(active.sum())
        counter.record(lead * n_q * n_sample + total, total, int(active.max()))
    if weights_out is not None:
        weights_out.append(weights.values)
    return T.matmul(V, T.transpose(weights))


def project_qkv(X: Tensor, p: MultiHeadParams, head: int) -> tuple[Tensor, Tensor, Tensor]:
    """Queries, keys and values of one head: ``W_q X``, ``W_k X``, ``W_v X``."""
    if not 0 <= head < p.heads:
        raise ConfigError(f"head index {head} out of range for {p.heads} heads")
    if p.wq.ndim != 3:
        raise ConfigError("project_qkv needs canonical (non-convolutional) projections")
    return (
        T.matmul(T.index(p.wq, head), X),
        T.matmul(T.index(p.wk, head), X),
        T.matmul(T.index(p.wv, head), X),
    )


def _heads_axis(X: Tensor) -> Tensor:
    return T.reshape(X, X.shape[:-2] + (1,) + X.shape[-2:])


def _combine_heads(Z: Tensor, p: MultiHeadParams) -> Tensor:
    # (..., r, s, n) -> (..., r*s, n): head outputs stacked row-wise
    r, s, n = Z.shape[-3:]
    return T.matmul(p.wo, T.reshape(Z, Z.shape[:-3] + (r * s, n)))


def _attend(Q, K, V, mask, counter, probsparse, weights_out):
    if probsparse is None:
        return scaled_dot_product_attention(Q, K, V, mask, counter, weights_out)
    return probsparse_attention(
        Q, K, V, mask, probsparse.u, probsparse.seed, counter, probsparse.factor, weights_out
    )


def multi_head_attention(
    X: Tensor,
    p: MultiHeadParams,
    mask: AttentionMask | None = None,
    counter: CostCounter | None = None,
    memory: Tensor | None = None,
    probsparse: ProbSparse | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """Multi-head attention over ``X`` (``d x n``, optional batch axes).

    With ``memory`` given, keys and values come from it (encoder-decoder
    attention) while queries come from ``X``.
    """
    if X.shape[-2] != p.wq.shape[2]:
        raise DimensionError(f"input has {X.shape[-2]} features, projections expect {p.wq.shape[2]}")
    if p.wq.ndim != 3:
        raise ConfigError("convolutional projections need conv_self_attention")
    source = X if memory is None else memory
    Xh, Sh = _heads_axis(X), _heads_axis(source)
    Q = T.matmul(p.wq, Xh)
    K = T.matmul(p.wk, Sh)
    V = T.matmul(p.wv, Sh)
    Z = _attend(Q, K, V, mask, counter, probsparse, weights_out)
    return _combine_heads(Z, p)


def conv_self_attention(
    X: Tensor,
    p: MultiHeadParams,
    mask: AttentionMask | None = None,
    counter: CostCounter | None = None,
    probsparse: ProbSparse | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """Self-attention whose queries and keys come from causal convolutions.

    ``p.wq``/``p.wk`` carry the kernel taps on their last axis; values use
    a kernel of size one.  With a single tap this computes exactly what
    :func:`multi_head_attention` computes.
    """
    if p.wq.ndim != 4:
        raise ConfigError("conv_self_attention needs (r, s1, d, k) query/key kernels")
    if p.kernel < 1:
        raise ConfigError(f"kernel size must be >= 1, got {p.kernel}")
    Xh = _heads_axis(X)
    Q = T.causal_conv1d(Xh, p.wq)
    K = T.causal_conv1d(Xh, p.wk)
    V = T.matmul(p.wv, Xh)
    Z = _attend(Q, K, V, mask, counter, probsparse, weights_out)
    return _combine_heads(Z, p)
