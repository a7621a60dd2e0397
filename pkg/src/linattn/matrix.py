"""Dense matrix core: immutable 2-D float64 matrices and the primitive ops
everything else composes (products, softmax, ELU, L2 normalizations,
layer norm, init/dropout helpers).

All operations are pure functions; a Matrix never changes after construction.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Matrix:
    """Immutable dense 2-D matrix of finite float64 values, row-major."""

    __slots__ = ("_a",)

    def __init__(self, array: np.ndarray | Sequence[Sequence[float]], copy: bool = True):
        a = np.array(array, dtype=np.float64, copy=copy)
        if a.ndim != 2:
            raise ShapeError(f"matrix must be 2-D, got ndim={a.ndim}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ShapeError(f"matrix must be at least 1x1, got {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("matrix entries must be finite (no NaN/Inf)")
        a.flags.writeable = False
        self._a = a

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape

    @property
    def data(self) -> tuple[float, ...]:
        """Entries flattened in row-major order."""
        return tuple(self._a.ravel())

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the entries."""
        return self._a

    def tolist(self) -> list[list[float]]:
        return self._a.tolist()

    def __getitem__(self, idx):
        return self._a[idx]

    def __eq__(self, other) -> bool:
        return isinstance(other, Matrix) and self._a.shape == other._a.shape and bool(
            np.array_equal(self._a, other._a)
        )

    def __hash__(self):
        return hash((self._a.shape, self._a.tobytes()))

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"

    @staticmethod
    def zeros(rows: int, cols: int) -> "Matrix":
        return Matrix(np.zeros((rows, cols)), copy=False)

    @staticmethod
    def full(rows: int, cols: int, value: float) -> "Matrix":
        return Matrix(np.full((rows, cols), float(value)), copy=False)

    @staticmethod
    def identity(n: int) -> "Matrix":
        return Matrix(np.eye(n), copy=False)

    @staticmethod
    def row_vector(values: Iterable[float]) -> "Matrix":
        return Matrix(np.asarray(list(values), dtype=np.float64)[None, :], copy=False)

    @staticmethod
    def col_vector(values: Iterable[float]) -> "Matrix":
        return Matrix(np.asarray(list(values), dtype=np.float64)[:, None], copy=False)


class Rng:
    """Deterministic random source; identical seeds yield identical draws.

    Single-owner: never share one Rng across threads. Use spawn() to hand
    independent child streams to parallel workers.
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(self.seed, _seq=s) for s in self._seq.spawn(n)]

    def normal(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=(rows, cols))

    def uniform(self, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=(rows, cols))

    def integers(self, low: int, high: int, size: int | None = None):
        return self._gen.integers(low, high, size=size)

    def shuffle(self, items: list) -> None:
        self._gen.shuffle(items)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    return Matrix(a.array @ b.array, copy=False)


def transpose(x: Matrix) -> Matrix:
    return Matrix(x.array.T.copy(), copy=False)


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return Matrix(a.array + b.array, copy=False)


def add_bias(x: Matrix, bias: Matrix) -> Matrix:
    """Add a 1 x cols bias row to every row of x."""
    if bias.rows != 1 or bias.cols != x.cols:
        raise ShapeError(f"add_bias: bias must be 1x{x.cols}, got {bias.shape}")
    return Matrix(x.array + bias.array, copy=False)


def scale(x: Matrix, c: float) -> Matrix:
    return Matrix(x.array * float(c), copy=False)


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    return Matrix(a.array * b.array, copy=False)


def concat_cols(parts: Sequence[Matrix]) -> Matrix:
    if not parts:
        raise ShapeError("concat_cols: need at least one matrix")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ, {rows} vs {p.rows}")
    return Matrix(np.concatenate([p.array for p in parts], axis=1), copy=False)


def softmax_rows(x: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction for overflow safety."""
    a = x.array
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return Matrix(e / e.sum(axis=1, keepdims=True), copy=False)


def softmax_cols(x: Matrix) -> Matrix:
    """Column-wise softmax; each column sums to 1."""
    a = x.array
    shifted = a - a.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return Matrix(e / e.sum(axis=0, keepdims=True), copy=False)


def elu(x: Matrix) -> Matrix:
    """Exponential linear unit: x for x >= 0, exp(x) - 1 otherwise."""
    a = x.array
    return Matrix(np.where(a >= 0.0, a, np.expm1(a)), copy=False)


def gelu(x: Matrix) -> Matrix:
    """Smooth GELU-family activation (tanh form)."""
    a = x.array
    inner = np.sqrt(2.0 / np.pi) * (a + 0.044715 * a ** 3)
    return Matrix(0.5 * a * (1.0 + np.tanh(inner)), copy=False)


def l2_normalize_rows(x: Matrix, scale_dim: int, epsilon: float) -> Matrix:
    """Scale row i by 1 / (sqrt(scale_dim) * max(||row i||_2, epsilon)).

    scale_dim must equal x.cols. Rows with norm <= epsilon pass through
    divided by the epsilon-clamped denominator, so zero rows stay zero.
    """
    if scale_dim != x.cols:
        raise ShapeError(f"l2_normalize_rows: scale_dim {scale_dim} != cols {x.cols}")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be > 0")
    a = x.array
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    denom = np.sqrt(float(scale_dim)) * np.maximum(norms, epsilon)
    return Matrix(a / denom, copy=False)


def l2_normalize_cols(x: Matrix, scale_len: int, epsilon: float) -> Matrix:
    """Scale column j by 1 / (sqrt(scale_len) * max(||col j||_2, epsilon))."""
    if scale_len != x.rows:
        raise ShapeError(f"l2_normalize_cols: scale_len {scale_len} != rows {x.rows}")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be > 0")
    a = x.array
    norms = np.linalg.norm(a, axis=0, keepdims=True)
    denom = np.sqrt(float(scale_len)) * np.maximum(norms, epsilon)
    return Matrix(a / denom, copy=False)


def layer_norm(x: Matrix, gain: Matrix, bias: Matrix, epsilon: float = 1e-12) -> Matrix:
    """Per-row standardization followed by the affine gain/bias (both 1 x cols)."""
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise ShapeError(
            f"layer_norm: gain/bias must be 1x{x.cols}, got {gain.shape} and {bias.shape}"
        )
    a = x.array
    mu = a.mean(axis=1, keepdims=True)
    var = a.var(axis=1, keepdims=True)
    xhat = (a - mu) / np.sqrt(var + epsilon)
    return Matrix(xhat * gain.array + bias.array, copy=False)


def gaussian_init(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 0.02) -> Matrix:
    return Matrix(rng.normal(rows, cols, mean, std), copy=False)


def dropout_mask(rng: Rng, rows: int, cols: int, rate: float) -> Matrix:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate), so no eval rescale."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return Matrix.full(rows, cols, 1.0)
    keep = (rng.uniform(rows, cols) >= rate).astype(np.float64)
    return Matrix(keep / (1.0 - rate), copy=False)
