"""Weight and activation quantizers with their backward estimators.

FixP4 weights use a per-tensor scale ``mean(|W|) * (2**n - 1) / 2**(n-1)``;
the normalized weight is clipped to ``[low, high]`` and rounded onto a
uniform grid of ``2**n`` levels. Posit4 weights snap to the nearest table
value. Activations use PACT: clip to ``[0, alpha]`` then uniform unsigned
quantization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .posit import InputDomainError, ScaleVariant, nearest_index, posit_table


class DegenerateScaleError(ValueError):
    """All-zero tensor: the FixP scale is 0. Skip quantization for it."""


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class FixPParams:
    n: int = 4
    int_bits: int = 2
    frac_bits: int = 2
    low: float = -2.0
    high: float = 1.75
    scale: float | None = None

    def __post_init__(self):
        if self.int_bits + self.frac_bits != self.n:
            raise ValueError("int_bits + frac_bits must equal n")
        if not self.low < self.high:
            raise ValueError("FixP bounds need low < high")

    @property
    def levels(self) -> int:
        return 2**self.n - 1

    @property
    def step(self) -> float:
        return (self.high - self.low) / self.levels

    @property
    def zero_offset(self) -> int:
        """Grid index of ``low`` relative to a signed code (8 for the 2.2 split)."""
        return int(round(-self.low / self.step))


@dataclass(frozen=True)
class PactParams:
    alpha: float = 10.0
    n: int = 4

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("PACT alpha must be positive")

    @property
    def levels(self) -> int:
        return 2**self.n - 1


@dataclass(frozen=True)
class PositGrid:
    variant: ScaleVariant
    alphas: np.ndarray = field(repr=False)
    thresholds: np.ndarray = field(repr=False)

    @classmethod
    def from_variant(cls, variant: ScaleVariant) -> "PositGrid":
        a = posit_table(variant)
        return cls(variant, a, 0.5 * (a[:-1] + a[1:]))


@dataclass(frozen=True)
class FixP4:
    params: FixPParams = FixPParams()

    kind = "fixp4"


@dataclass(frozen=True)
class Posit4:
    variant: ScaleVariant = ScaleVariant.SC4

    kind = "posit4"


QuantScheme = FixP4 | Posit4


def fixp_scale(W, p: FixPParams = FixPParams()) -> float:
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    scale = float(np.mean(np.abs(W))) * p.levels / 2 ** (p.n - 1)
    if scale == 0.0:
        raise DegenerateScaleError(
            "mean(|W|) is zero; leave this tensor unquantized instead of FixP-scaling it"
        )
    return scale


def fixp_grid_index(W, scale: float, p: FixPParams = FixPParams()) -> np.ndarray:
    """Integer grid index ``0..2**n-1`` for each element of ``W / scale``."""
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise InputDomainError("FixP quantization needs finite inputs")
    u = np.clip(W / scale, p.low, p.high)
    return round_half_away((u - p.low) * p.levels / (p.high - p.low)).astype(np.int64)


def fixp_quantize_weights(W, p: FixPParams = FixPParams(), scale: float | None = None):
    """Returns ``(W_q, scale)``; ``W_q`` is in normalized units.

    The weight used downstream is ``scale * W_q``. Pass ``scale`` (or set it
    on ``p``) to hold it fixed.
    """
    if scale is None:
        scale = p.scale if p.scale is not None else fixp_scale(W, p)
    idx = fixp_grid_index(W, scale, p)
    return idx * p.step + p.low, scale


def fixp_dequantize(W, p: FixPParams = FixPParams(), scale: float | None = None) -> np.ndarray:
    Wq, s = fixp_quantize_weights(W, p, scale)
    return s * Wq


def fixp_codes(W, scale: float, p: FixPParams = FixPParams()) -> np.ndarray:
    """Signed integer weight codes; normalized value is ``code * step``."""
    return fixp_grid_index(W, scale, p) - p.zero_offset


def posit_quantize_weights(W, variant: ScaleVariant = ScaleVariant.UNIT) -> np.ndarray:
    return posit_table(variant)[nearest_index(W, variant)]


def pact_forward(x, p: PactParams):
    return np.clip(x, 0.0, p.alpha)


def pact_quantize(y, p: PactParams):
    """Returns ``(codes, x_q)`` for clipped activations ``y``."""
    codes = round_half_away(np.asarray(y) * p.levels / p.alpha).astype(np.int64)
    codes = np.clip(codes, 0, p.levels)
    return codes, codes * (p.alpha / p.levels)


def ste_grad(x, low: float, high: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return ((x >= low) & (x <= high)).astype(np.float64)


def _interval(x, grid: PositGrid):
    a = grid.alphas
    i = np.clip(np.searchsorted(a, x, side="right") - 1, 0, len(a) - 2)
    width = a[i + 1] - a[i]
    mid = 0.5 * (a[i] + a[i + 1])
    inside = (x >= a[0]) & (x <= a[-1])
    return width, mid, inside


def posit_surrogate(x, grid: PositGrid) -> np.ndarray:
    """Piecewise tanh whose derivative is the Posit backward estimator.

    On ``[a_i, a_{i+1}]`` with width ``d`` and midpoint ``m`` this is
    ``(2/d) * tanh((5/d) * (x - m))``; zero outside the table range.
    """
    x = np.asarray(x, dtype=np.float64)
    d, m, inside = _interval(x, grid)
    arg = np.where(inside, (5.0 / d) * (x - m), 0.0)
    return np.where(inside, (2.0 / d) * np.tanh(arg), 0.0)


def posit_grad(x, grid: PositGrid) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d, m, inside = _interval(x, grid)
    arg = np.where(inside, (5.0 / d) * (x - m), 0.0)
    sech2 = 1.0 / np.cosh(arg) ** 2
    return np.where(inside, (10.0 / d**2) * sech2, 0.0)
