"""Attention mechanisms over N x d query/key/value matrices.

Three interchangeable mechanisms:

  standard       row-softmax of scaled QK^T, then the value mix (N x N scores)
  linrec         ELU + row-wise L2 map on Q, ELU + column-wise L2 map on K,
                 K^T V computed first so the fast path allocates a d x d
                 intermediate instead of N x N
  softmax_twice  row-softmax of Q against column-softmax of K, right-to-left

plus checkers for the normalized/non-negative score conditions the
decomposed form must satisfy, and the probability decomposition of the
resulting score matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import matrix as mx
from .matrix import Matrix


@dataclass(frozen=True)
class AttentionConfig:
    mechanism: str = "standard"  # standard | linrec | softmax_twice
    seq_len: int = 1
    hidden: int = 1
    epsilon: float = 1e-12
    mask_policy: str = "none"  # none | padding_zero_rows

    MECHANISMS = ("standard", "linrec", "softmax_twice")

    def __post_init__(self):
        if self.mechanism not in self.MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}, expected one of {self.MECHANISMS}")
        if self.seq_len < 1 or self.hidden < 1:
            raise ValueError("seq_len and hidden must be >= 1")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be > 0")
        if self.mask_policy not in ("none", "padding_zero_rows"):
            raise ValueError(f"unknown mask_policy {self.mask_policy!r}")

    @property
    def is_long_term(self) -> bool:
        """Sequence window exceeding 1.5x the embedding width."""
        return self.seq_len / self.hidden > 1.5


@dataclass
class AttentionOutput:
    output: Matrix             # N x d, same shape as V
    scores: Matrix | None      # N x N, materialized on demand only


class AllocationAudit:
    """Records every intermediate buffer an attention call allocates."""

    def __init__(self):
        self.buffers: list[tuple[str, int, int]] = []

    def note(self, name: str, rows: int, cols: int) -> None:
        self.buffers.append((name, rows, cols))

    def bytes_of(self, name: str) -> int:
        return max((r * c * 8 for n, r, c in self.buffers if n == name), default=0)

    @property
    def peak_bytes(self) -> int:
        return max((r * c * 8 for _, r, c in self.buffers), default=0)


def _check_qkv(q: Matrix, k: Matrix, v: Matrix) -> None:
    if not (q.shape == k.shape == v.shape):
        raise mx.ShapeError(f"Q, K, V must share one NxD shape: {q.shape}, {k.shape}, {v.shape}")


def _apply_mask_policy(out: Matrix, q: Matrix, policy: str) -> Matrix:
    if policy != "padding_zero_rows":
        return out
    zero_rows = np.linalg.norm(q.array, axis=1) == 0.0
    if not zero_rows.any():
        return out
    a = out.array.copy()
    a[zero_rows] = 0.0
    return Matrix(a, copy=False)


def standard_attention(q: Matrix, k: Matrix, v: Matrix,
                       mask_policy: str = "none",
                       audit: AllocationAudit | None = None) -> AttentionOutput:
    """Row-softmax of QK^T / sqrt(d) applied to V; scores are the softmax output."""
    _check_qkv(q, k, v)
    n, d = q.shape
    logits = mx.scale(mx.matmul(q, mx.transpose(k)), 1.0 / np.sqrt(d))
    scores = mx.softmax_rows(logits)
    if audit is not None:
        audit.note("logits", n, n)
        audit.note("scores", n, n)
    out = _apply_mask_policy(mx.matmul(scores, v), q, mask_policy)
    return AttentionOutput(output=out, scores=scores)


def linrec_maps(q: Matrix, k: Matrix, epsilon: float) -> tuple[Matrix, Matrix]:
    """ELU then the row-wise / column-wise L2 maps for Q and K."""
    qn = mx.l2_normalize_rows(mx.elu(q), q.cols, epsilon)
    kn = mx.l2_normalize_cols(mx.elu(k), k.rows, epsilon)
    return qn, kn


def linrec_attention(q: Matrix, k: Matrix, v: Matrix, cfg: AttentionConfig,
                     audit: AllocationAudit | None = None) -> AttentionOutput:
    """Linear-complexity path: K^T V first (d x d), then the mapped-Q product.

    Never materializes an N x N matrix; use linrec_scores() when the score
    matrix itself is wanted for analysis.
    """
    _check_qkv(q, k, v)
    n, d = q.shape
    qn, kn = linrec_maps(q, k, cfg.epsilon)
    kv = mx.matmul(mx.transpose(kn), v)
    if audit is not None:
        audit.note("q_mapped", n, d)
        audit.note("k_mapped", n, d)
        audit.note("kv", d, d)
    out = _apply_mask_policy(mx.matmul(qn, kv), q, cfg.mask_policy)
    return AttentionOutput(output=out, scores=None)


def linrec_scores(q: Matrix, k: Matrix, cfg: AttentionConfig) -> Matrix:
    """Score matrix of the decomposed form (analysis/heatmap path, N x N)."""
    qn, kn = linrec_maps(q, k, cfg.epsilon)
    return mx.matmul(qn, mx.transpose(kn))


def softmax_twice_attention(q: Matrix, k: Matrix, v: Matrix,
                            audit: AllocationAudit | None = None) -> AttentionOutput:
    """Row-softmax(Q) @ col-softmax(K)^T @ V, evaluated right-to-left."""
    _check_qkv(q, k, v)
    n, d = q.shape
    qs = mx.softmax_rows(q)
    ks = mx.softmax_cols(k)
    kv = mx.matmul(mx.transpose(ks), v)
    if audit is not None:
        audit.note("kv", d, d)
    return AttentionOutput(output=mx.matmul(qs, kv), scores=None)


def softmax_twice_scores(q: Matrix, k: Matrix) -> Matrix:
    return mx.matmul(mx.softmax_rows(q), mx.transpose(mx.softmax_cols(k)))


def attend(q: Matrix, k: Matrix, v: Matrix, cfg: AttentionConfig,
           audit: AllocationAudit | None = None) -> AttentionOutput:
    """Dispatch on cfg.mechanism."""
    if cfg.mechanism == "standard":
        return standard_attention(q, k, v, cfg.mask_policy, audit)
    if cfg.mechanism == "linrec":
        return linrec_attention(q, k, v, cfg, audit)
    return softmax_twice_attention(q, k, v, audit)


# ---------------------------------------------------------------------------
# condition checkers for the decomposed score matrix
# ---------------------------------------------------------------------------

@dataclass
class Condition1Report:
    """Per query row: total score mass sum_m sum_j Qp[i,j] Kp[m,j] vs the <= 1 bound."""
    row_sums: np.ndarray
    passes: np.ndarray
    margins: np.ndarray          # 1 - row_sum; negative means violated

    @property
    def all_pass(self) -> bool:
        return bool(self.passes.all())


@dataclass
class Condition2Report:
    """Pairwise inner products Qp[i] . Kp[m] vs the >= 0 bound."""
    min_inner: float
    passes: np.ndarray           # N x N booleans
    violation_fraction: float

    @property
    def all_pass(self) -> bool:
        return bool(self.passes.all())


@dataclass
class Condition3Report:
    """Row sums of the mapped Q and column sums of the mapped K vs 1."""
    q_row_sums: np.ndarray
    k_col_sums: np.ndarray
    q_passes: np.ndarray
    k_passes: np.ndarray

    @property
    def all_pass(self) -> bool:
        return bool(self.q_passes.all() and self.k_passes.all())


def check_condition1(q_mapped: Matrix, k_mapped: Matrix, tol: float = 1e-9) -> Condition1Report:
    if q_mapped.cols != k_mapped.cols:
        raise mx.ShapeError(f"mapped Q/K widths differ: {q_mapped.shape} vs {k_mapped.shape}")
    k_col_totals = k_mapped.array.sum(axis=0)          # sum over m per feature j
    sums = q_mapped.array @ k_col_totals               # per query row i
    return Condition1Report(row_sums=sums, passes=sums <= 1.0 + tol, margins=1.0 - sums)


def check_condition2(q_mapped: Matrix, k_mapped: Matrix, tol: float = 1e-9) -> Condition2Report:
    if q_mapped.cols != k_mapped.cols:
        raise mx.ShapeError(f"mapped Q/K widths differ: {q_mapped.shape} vs {k_mapped.shape}")
    inner = q_mapped.array @ k_mapped.array.T
    passes = inner >= -tol
    return Condition2Report(
        min_inner=float(inner.min()),
        passes=passes,
        violation_fraction=float(1.0 - passes.mean()),
    )


def check_condition3(q_mapped: Matrix, k_mapped: Matrix, tol: float = 1e-9) -> Condition3Report:
    q_sums = q_mapped.array.sum(axis=1)
    k_sums = k_mapped.array.sum(axis=0)
    return Condition3Report(
        q_row_sums=q_sums,
        k_col_sums=k_sums,
        q_passes=q_sums <= 1.0 + tol,
        k_passes=k_sums <= 1.0 + tol,
    )


@dataclass
class ProbabilityView:
    """Statistical reading of the decomposed scores.

    feature_probs[i, j]     weight of latent feature j for query position i
    conditional_probs[k, j] weight of position k given feature j; shared
                            across query rows, which is what makes the
                            decomposition cheap
    attention_probs[i, k]   total mass of position k for query i; equals the
                            decomposed score matrix entrywise
    """
    feature_probs: Matrix
    conditional_probs: Matrix
    attention_probs: Matrix


def probability_view(q_mapped: Matrix, k_mapped: Matrix) -> ProbabilityView:
    if q_mapped.cols != k_mapped.cols:
        raise mx.ShapeError(f"mapped Q/K widths differ: {q_mapped.shape} vs {k_mapped.shape}")
    return ProbabilityView(
        feature_probs=q_mapped,
        conditional_probs=k_mapped,
        attention_probs=mx.matmul(q_mapped, mx.transpose(k_mapped)),
    )


# ---------------------------------------------------------------------------
# score smoothness (per-row entropy)
# ---------------------------------------------------------------------------

def row_entropies(scores: Matrix, clamp_negative: bool = False) -> np.ndarray:
    """Entropy (nats) of each score row; optionally clamp negatives and renormalize.

    All-zero rows (possible after clamping) get entropy 0.
    """
    a = scores.array
    if clamp_negative:
        a = np.maximum(a, 0.0)
    totals = a.sum(axis=1, keepdims=True)
    out = np.zeros(a.shape[0])
    ok = totals[:, 0] > 0.0
    if ok.any():
        p = a[ok] / totals[ok]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0.0, -p * np.log(p), 0.0)
        out[ok] = terms.sum(axis=1)
    return out


@dataclass
class SmoothnessSample:
    sample: int
    standard_entropy: np.ndarray
    linrec_entropy: np.ndarray


@dataclass
class SmoothnessReport:
    samples: list[SmoothnessSample] = field(default_factory=list)

    @property
    def fraction_linrec_ge(self) -> float:
        """Fraction of rows where the linear mechanism's entropy is >= standard's."""
        ge = total = 0
        for s in self.samples:
            ge += int((s.linrec_entropy >= s.standard_entropy).sum())
            total += s.standard_entropy.size
        return ge / total if total else 0.0

    def medians(self) -> tuple[float, float]:
        std = np.concatenate([s.standard_entropy for s in self.samples])
        lin = np.concatenate([s.linrec_entropy for s in self.samples])
        return float(np.median(std)), float(np.median(lin))


def smoothness_report(seed: int, n: int, d: int, samples: int) -> SmoothnessReport:
    """Entropy of standard vs decomposed-linear score rows on matched Gaussian inputs."""
    rng = mx.Rng(seed)
    cfg = AttentionConfig(mechanism="linrec", seq_len=n, hidden=d)
    report = SmoothnessReport()
    for s in range(samples):
        q = Matrix(rng.normal(n, d), copy=False)
        k = Matrix(rng.normal(n, d), copy=False)
        std_scores = mx.softmax_rows(mx.scale(mx.matmul(q, mx.transpose(k)), 1.0 / np.sqrt(d)))
        lin_scores = linrec_scores(q, k, cfg)
        report.samples.append(SmoothnessSample(
            sample=s,
            standard_entropy=row_entropies(std_scores),
            linrec_entropy=row_entropies(lin_scores, clamp_negative=True),
        ))
    return report
