"""Translated Fourier operator for fixed-size compression of token streams.

A run of token vectors is folded into a bank of ``2k`` real spectral
coefficients: the running cosine and sine moments of every tracked dimension
for each of ``k`` frequency orders. Folding one token is a rank-1 update, so
batch compression and one-token-at-a-time streaming commute, and the state
size never grows with sequence length. Reconstruction evaluates a weighted
inverse transform at any folded position.

Phases are indexed by *absolute* token position so that a state built during
prefill and a state extended by streaming evictions agree without rephasing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FoldOrderError",
    "FourierBasis",
    "ReconMode",
    "ReconstructionRangeError",
    "SpectralState",
    "build_basis",
    "compress_batch",
    "fold_token",
    "reconstruct",
    "reconstruction_mse",
]


class FoldOrderError(ValueError):
    """A token was folded at a position that breaks the in-order contract."""


class ReconstructionRangeError(ValueError):
    """Reconstruction was requested outside the folded position range."""


class ReconMode(enum.Enum):
    """Weighting applied by the inverse transform during reconstruction.

    TRANSPOSE applies the plain transpose of the compression operator scaled
    by ``1/k``; it is cheap but not an exact inverse of the unnormalized
    projection. NORMALIZED uses standard discrete-Fourier synthesis weights
    (``1/T`` for the order-0 rows, ``2/T`` above) and recovers band-limited
    signals exactly when the folded run covers a full period.
    """

    TRANSPOSE = "transpose"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class FourierBasis:
    """Real translated-Fourier operator: ``orders`` frequencies, period ``period``.

    The column for absolute position ``t`` interleaves cosine and sine rows:
    row ``2n`` holds ``cos(2*pi*n*t/period)`` and row ``2n+1`` holds
    ``sin(2*pi*n*t/period)`` for ``n < orders``. Row 0 is all ones and row 1
    is all zeros (the order-0 sine). Columns repeat with period ``period``.

    Immutable; safe to share across threads.
    """

    orders: int
    period: int

    def __post_init__(self):
        if self.orders < 1:
            raise ValueError(f"orders must be >= 1, got {self.orders}")
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")

    @property
    def n_rows(self) -> int:
        return 2 * self.orders

    def _phases(self, positions: np.ndarray) -> np.ndarray:
        n = np.arange(self.orders, dtype=np.int64)
        # (n*t) mod period keeps trig arguments in [0, 2*pi) even at large t
        frac = (n[:, None] * positions[None, :]) % self.period
        return (2.0 * np.pi / self.period) * frac.astype(np.float64)

    def column(self, pos: int) -> np.ndarray:
        """Basis column for one absolute position, shape ``(2*orders,)``."""
        if pos < 0:
            raise ValueError(f"position must be >= 0, got {pos}")
        phases = self._phases(np.asarray([pos], dtype=np.int64))[:, 0]
        col = np.empty(self.n_rows, dtype=np.float64)
        col[0::2] = np.cos(phases)
        col[1::2] = np.sin(phases)
        return col

    def columns(self, positions) -> np.ndarray:
        """Basis columns for many positions, shape ``(2*orders, len(positions))``."""
        pos = np.asarray(positions, dtype=np.int64)
        if pos.ndim != 1:
            raise ValueError("positions must be one-dimensional")
        if pos.size and pos.min() < 0:
            raise ValueError("positions must be >= 0")
        phases = self._phases(pos)
        out = np.empty((self.n_rows, pos.size), dtype=np.float64)
        out[0::2] = np.cos(phases)
        out[1::2] = np.sin(phases)
        return out

    @property
    def rows(self) -> np.ndarray:
        """Full ``(2*orders, period)`` operator. O(orders*period) memory."""
        return self.columns(np.arange(self.period))

    def synthesis_weights(self) -> np.ndarray:
        """Per-row inverse-transform weights for NORMALIZED reconstruction.

        The order-0 sine row gets the same ``1/period`` weight as the cosine
        row; its coefficients are identically zero so the value never matters.
        """
        w = np.full(self.n_rows, 2.0 / self.period, dtype=np.float64)
        w[0] = w[1] = 1.0 / self.period
        return w


def build_basis(orders: int, period: int) -> FourierBasis:
    """Construct the real translated-Fourier operator.

    Args:
        orders: number of complex frequency orders k (state has 2k real rows).
        period: window length T in token positions; set this to the maximum
            context length so absolute positions never wrap.
    """
    return FourierBasis(orders=orders, period=period)


@dataclass
class SpectralState:
    """Running spectral moments of a contiguous run of D-dimensional tokens.

    ``coeffs[r, d]`` is the sum over folded positions ``t`` of
    ``column(t)[r] * value_t[d]``, accumulated in float64 in fold order.
    Single-writer: fold from one thread at a time; distinct states may be
    folded in parallel.
    """

    coeffs: np.ndarray
    token_count: int = 0
    first_pos: int | None = None
    last_pos: int | None = None

    @classmethod
    def zeros(cls, orders: int, dim: int) -> "SpectralState":
        return cls(coeffs=np.zeros((2 * orders, dim), dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]

    def copy(self) -> "SpectralState":
        return SpectralState(
            coeffs=self.coeffs.copy(),
            token_count=self.token_count,
            first_pos=self.first_pos,
            last_pos=self.last_pos,
        )


def compress_batch(basis: FourierBasis, values, start_pos: int) -> SpectralState:
    """Fold a block of rows at absolute positions ``start_pos..start_pos+L-1``.

    Accumulates the per-position rank-1 updates in ascending position order,
    which makes the result bit-identical to streaming the same rows through
    :func:`fold_token`. An empty block yields the zero state.
    """
    if start_pos < 0:
        raise ValueError(f"start_pos must be >= 0, got {start_pos}")
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 2:
        raise ValueError(f"values must be 2-D (length x dim), got shape {vals.shape}")
    length, dim = vals.shape
    state = SpectralState.zeros(basis.orders, dim)
    if length == 0:
        return state
    coeffs = state.coeffs
    for i in range(length):
        coeffs += basis.column(start_pos + i)[:, None] * vals[i]
    state.token_count = length
    state.first_pos = start_pos
    state.last_pos = start_pos + length - 1
    return state


def fold_token(state: SpectralState, basis: FourierBasis, value, pos: int) -> SpectralState:
    """Fold one token vector at absolute position ``pos`` into the state.

    Mutates ``state`` in place and returns it. Positions must arrive in
    order: the first fold may use any ``pos >= 0``; afterwards only
    ``last_pos + 1`` is accepted.
    """
    if pos < 0:
        raise ValueError(f"position must be >= 0, got {pos}")
    vec = np.asarray(value, dtype=np.float64)
    if vec.shape != (state.dim,):
        raise ValueError(f"value must have shape ({state.dim},), got {vec.shape}")
    if state.token_count == 0:
        state.first_pos = pos
    elif pos != state.last_pos + 1:
        raise FoldOrderError(
            f"non-contiguous fold: expected position {state.last_pos + 1}, got {pos}"
        )
    state.coeffs += basis.column(pos)[:, None] * vec
    state.token_count += 1
    state.last_pos = pos
    return state


def reconstruct(
    state: SpectralState,
    basis: FourierBasis,
    positions,
    mode: ReconMode = ReconMode.NORMALIZED,
) -> np.ndarray:
    """Rebuild token vectors at the given absolute positions.

    Every position must lie inside ``[first_pos, last_pos]`` of the folded
    run; extrapolation is undefined. Returns ``(len(positions), D)``.
    """
    pos = np.asarray(positions, dtype=np.int64)
    if pos.size == 0:
        return np.zeros((0, state.dim), dtype=np.float64)
    if state.token_count == 0:
        raise ReconstructionRangeError("cannot reconstruct from an empty state")
    if pos.min() < state.first_pos or pos.max() > state.last_pos:
        raise ReconstructionRangeError(
            f"positions must lie in [{state.first_pos}, {state.last_pos}], "
            f"got range [{pos.min()}, {pos.max()}]"
        )
    cols = basis.columns(pos)
    if mode is ReconMode.NORMALIZED:
        weighted = cols * basis.synthesis_weights()[:, None]
        return weighted.T @ state.coeffs
    if mode is ReconMode.TRANSPOSE:
        return (cols.T @ state.coeffs) / basis.orders
    raise ValueError(f"unknown reconstruction mode: {mode!r}")


def reconstruction_mse(original, reconstructed) -> np.ndarray:
    """Per-dimension mean squared error between two ``(L, D)`` blocks."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.mean((a - b) ** 2, axis=0)
