"""Posit(4,1) codec, scaled variants, and a general P(n, es) decoder.

Codes are 4-bit unsigned patterns. Negative posits are the two's complement
of their positive counterpart, so ordering the codes as signed 4-bit integers
orders the decoded values. ``0b1000`` is NaR and decodes to ``nan``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

NAR_BITS = 0b1000
NAR = float("nan")


class InputDomainError(ValueError):
    """Raised when a quantizer receives a non-finite input."""


class ScaleVariant(enum.Enum):
    """Posit4 value set, optionally divided by 4 or 8.

    The divisor is a power of two, so scaling is a binary point shift of
    ``shift`` positions to the right.
    """

    UNIT = ("unit", 0)
    SC4 = ("sc4", 2)
    SC8 = ("sc8", 3)

    def __init__(self, label: str, shift: int):
        self.label = label
        self.shift = shift

    @property
    def scale(self) -> float:
        return math.ldexp(1.0, -self.shift)

    @classmethod
    def from_label(cls, label: str) -> "ScaleVariant":
        for v in cls:
            if v.label == label:
                return v
        raise ValueError(f"unknown posit variant {label!r}; expected unit, sc4 or sc8")


@dataclass(frozen=True)
class PositConfig:
    n: int
    es: int

    def __post_init__(self):
        if not 2 <= self.n <= 32:
            raise ValueError(f"posit width n={self.n} outside 2..32")
        if not 0 <= self.es <= 3 or self.es >= self.n - 1:
            raise ValueError(f"invalid es={self.es} for n={self.n}")

    @property
    def useed(self) -> int:
        return 2 ** (2**self.es)


P41 = PositConfig(4, 1)


@dataclass(frozen=True)
class RawPosit:
    """Decoded sign/exponent form used inside the MAC.

    A nonzero Posit4 has a one-hot magnitude ``2**exp``. ``zero`` and ``nar``
    flag the two special patterns; ``sign`` and ``exp`` are 0 for them.
    """

    sign: int
    exp: int
    zero: bool = False
    nar: bool = False

    @property
    def value(self) -> float:
        if self.nar:
            return NAR
        if self.zero:
            return 0.0
        return self.sign * math.ldexp(1.0, self.exp)


def twos_negate(code: int) -> int:
    return (-code) & 0xF


def signed_code(code: int) -> int:
    """Interpret a 4-bit pattern as a two's-complement integer."""
    return code - 16 if code & 0x8 else code


def posit_val_general(bits: int, cfg: PositConfig) -> float:
    """Value of an ``n``-bit posit pattern (decode only).

    The exponent field is read as an unsigned integer; bits cut off by a long
    regime count as zeros.
    """
    n, es = cfg.n, cfg.es
    if not 0 <= bits < (1 << n):
        raise ValueError(f"pattern {bits:#x} does not fit in {n} bits")
    if bits == 0:
        return 0.0
    if bits == 1 << (n - 1):
        return NAR

    sign = -1 if bits >> (n - 1) else 1
    if sign < 0:
        bits = (-bits) & ((1 << n) - 1)

    # regime: run of identical bits after the sign bit
    rest = n - 1
    first = (bits >> (rest - 1)) & 1
    m = 0
    pos = rest - 1
    while pos >= 0 and ((bits >> pos) & 1) == first:
        m += 1
        pos -= 1
    k = m - 1 if first else -m
    pos -= 1  # skip the terminating bit (may run off the end)

    remaining = max(pos + 1, 0)
    e_len = min(es, remaining)
    e = (bits >> (remaining - e_len)) & ((1 << e_len) - 1) if e_len else 0
    e <<= es - e_len
    f_len = remaining - e_len
    f = bits & ((1 << f_len) - 1) if f_len else 0

    scale_exp = k * (1 << es) + e
    mantissa = 1.0 + math.ldexp(f, -f_len) if f_len else 1.0
    return sign * math.ldexp(mantissa, scale_exp)


# Raw decode LUT for positive Posit(4,1) codes 1..7: power-of-two exponents.
_RAW_EXP = {1: -4, 2: -2, 3: -1, 4: 0, 5: 1, 6: 2, 7: 4}


def _build_raw_lut() -> tuple[RawPosit, ...]:
    lut = []
    for code in range(16):
        if code == 0:
            lut.append(RawPosit(0, 0, zero=True))
        elif code == NAR_BITS:
            lut.append(RawPosit(0, 0, nar=True))
        elif code & 0x8:
            lut.append(RawPosit(-1, _RAW_EXP[twos_negate(code)]))
        else:
            lut.append(RawPosit(1, _RAW_EXP[code]))
    return tuple(lut)


RAW_LUT = _build_raw_lut()


def posit_decode_raw(code: int, variant: ScaleVariant = ScaleVariant.UNIT) -> RawPosit:
    raw = RAW_LUT[code & 0xF]
    if raw.zero or raw.nar or variant is ScaleVariant.UNIT:
        return raw
    return RawPosit(raw.sign, raw.exp - variant.shift)


def posit_decode(code: int, variant: ScaleVariant = ScaleVariant.UNIT) -> float:
    return posit_decode_raw(code, variant).value


def posit_table(variant: ScaleVariant = ScaleVariant.UNIT) -> np.ndarray:
    """The 15 finite values of the variant, ascending."""
    return _TABLES[variant].copy()


def table_index_to_code(idx):
    """Table position 0..14 to 4-bit code (position 7 is zero)."""
    return (np.asarray(idx) - 7) & 0xF


_TABLES = {
    v: np.array([posit_decode(int(c), v) for c in table_index_to_code(np.arange(15))])
    for v in ScaleVariant
}
_THRESHOLDS = {v: 0.5 * (t[:-1] + t[1:]) for v, t in _TABLES.items()}


def nearest_index(x, variant: ScaleVariant) -> np.ndarray:
    """Index into ``posit_table(variant)`` of the nearest value.

    Midpoint ties go to the value of smaller magnitude. Out-of-range inputs
    saturate to the table ends.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputDomainError("posit quantization needs finite inputs")
    t = _THRESHOLDS[variant]
    # positive ties resolve downward, negative ties upward (toward zero)
    lo = np.searchsorted(t, x, side="left")
    hi = np.searchsorted(t, x, side="right")
    return np.where(x >= 0, lo, hi)


def posit_quantize(x: float, variant: ScaleVariant = ScaleVariant.UNIT) -> int:
    return int(table_index_to_code(nearest_index(x, variant)))


def posit_quantize_array(x, variant: ScaleVariant = ScaleVariant.UNIT) -> np.ndarray:
    """Vectorised ``posit_quantize``; returns uint8 codes."""
    return table_index_to_code(nearest_index(x, variant)).astype(np.uint8)


def posit_decode_array(codes, variant: ScaleVariant = ScaleVariant.UNIT) -> np.ndarray:
    lut = np.array([posit_decode(c, variant) for c in range(16)])
    return lut[np.asarray(codes, dtype=np.int64) & 0xF]


def decode_table_rows() -> list[dict]:
    """Rows for the exported code table (code, bit pattern, three variants)."""
    rows = []
    for code in range(16):
        vals = [posit_decode(code, v) for v in ScaleVariant]
        rows.append(
            {
                "code": code,
                "bit_pattern": format(code, "04b"),
                "value_unit": vals[0],
                "value_sc4": vals[1],
                "value_sc8": vals[2],
            }
        )
    return rows
