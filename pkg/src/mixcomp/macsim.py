"""Bit-exact Posit/FixP multiply-accumulate simulation and energy overhead model.

Posit/FixP path: the 4-bit weight is decoded through a 16-entry LUT into a
sign and a power-of-two exponent, so ``|W x A|`` is the activation code
shifted left by ``exp + 4``. The product (14-bit field) is sign-set in two's
complement and added to a 24-bit accumulator whose LSB is ``2**-4``. Scaled
variants keep the same integer datapath and move the binary point at readout
(LSB ``2**-6`` for sc4, ``2**-7`` for sc8).

FixP/FixP path: signed 4-bit weight code times unsigned 4-bit activation code
into an 18-bit accumulator. All accumulators saturate and set a sticky flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .posit import NAR_BITS, ScaleVariant, posit_decode_raw

POSIT_ACC_WIDTH = 24
FIXP_ACC_WIDTH = 18
PRODUCT_WIDTH = 14
GUARD_BITS = 10


class InvalidOperand(ValueError):
    pass


class UndefinedTrace(ValueError):
    pass


@dataclass(frozen=True)
class MacAccumulator:
    value: int = 0
    width: int = POSIT_ACC_WIDTH
    saturated: bool = False
    lsb_exp: int = -4

    @property
    def max(self) -> int:
        return (1 << (self.width - 1)) - 1

    @property
    def min(self) -> int:
        return -(1 << (self.width - 1))

    def add(self, product: int) -> "MacAccumulator":
        v = self.value + product
        hi = (1 << (self.width - 1)) - 1
        lo = -hi - 1
        sat = self.saturated
        if v > hi:
            v, sat = hi, True
        elif v < lo:
            v, sat = lo, True
        return MacAccumulator(v, self.width, sat, self.lsb_exp)

    @property
    def exact(self) -> Fraction:
        return Fraction(self.value) * Fraction(2) ** self.lsb_exp


def posit_accumulator(variant: ScaleVariant = ScaleVariant.UNIT, width: int = POSIT_ACC_WIDTH) -> MacAccumulator:
    return MacAccumulator(0, width, False, -4 - variant.shift)


def fixp_accumulator(width: int = FIXP_ACC_WIDTH) -> MacAccumulator:
    return MacAccumulator(0, width, False, 0)


def _check_codes(w: int, a: int):
    if not 0 <= w <= 15:
        raise InvalidOperand(f"weight code {w} is not a 4-bit pattern")
    if not 0 <= a <= 15:
        raise InvalidOperand(f"activation code {a} is not a 4-bit unsigned value")


def posit_product(w: int, a: int) -> int:
    """Signed ``W x A`` in ``2**-4`` units of the unscaled Posit4 grid."""
    _check_codes(w, a)
    if w == NAR_BITS:
        raise InvalidOperand("NaR weight cannot enter the MAC")
    raw = posit_decode_raw(w)
    if raw.zero:
        return 0
    mag = a << (raw.exp + 4)
    assert mag < 1 << (PRODUCT_WIDTH - 1), "product exceeds the 14-bit field"
    return -mag if raw.sign < 0 else mag


def mac_posit_fixp(w: int, a: int, acc: MacAccumulator, variant: ScaleVariant = ScaleVariant.UNIT) -> MacAccumulator:
    if acc.lsb_exp != -4 - variant.shift:
        raise ValueError(f"accumulator LSB 2**{acc.lsb_exp} does not match variant {variant.label}")
    return acc.add(posit_product(w, a))


def fixp_product(w: int, a: int) -> int:
    if not -8 <= w <= 7:
        raise InvalidOperand(f"FixP weight code {w} outside -8..7")
    if not 0 <= a <= 15:
        raise InvalidOperand(f"activation code {a} is not a 4-bit unsigned value")
    return w * a


def mac_fixp_fixp(w: int, a: int, acc: MacAccumulator) -> MacAccumulator:
    return acc.add(fixp_product(w, a))


# ---------------------------------------------------------------- combined unit

FIXP = "fixp"


def _path_of(kind) -> ScaleVariant | str:
    if kind == FIXP or isinstance(kind, ScaleVariant):
        return kind
    if isinstance(kind, str):
        return ScaleVariant.from_label(kind)
    raise ValueError(f"unknown MAC path {kind!r}")


@dataclass
class DotResult:
    exact: Fraction
    accumulators: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.exact)

    @property
    def saturated(self) -> bool:
        return any(a.saturated for a in self.accumulators.values())


def dot_product_mixed(
    w_codes,
    kinds,
    a_codes,
    act_scale=1.0,
    fixp_scale=1.0,
    fixp_step=0.25,
    posit_width=POSIT_ACC_WIDTH,
    fixp_width=FIXP_ACC_WIDTH,
) -> DotResult:
    """Route each (weight, activation) pair to its MAC path and read out.

    ``kinds`` is one path for the whole vector or one per element: ``"fixp"``
    or a Posit variant. FixP weight codes are signed (``-8..7``), Posit codes
    are 4-bit patterns. The readout multiplies each accumulator by its LSB,
    the FixP weight step and scale where relevant, and the activation scale.
    """
    w_codes = [int(w) for w in w_codes]
    a_codes = [int(a) for a in a_codes]
    if len(w_codes) != len(a_codes):
        raise ValueError("weight and activation vectors differ in length")
    if isinstance(kinds, (str, ScaleVariant)):
        kinds = [kinds] * len(w_codes)
    resolved: dict = {}
    paths = [resolved[k] if k in resolved else resolved.setdefault(k, _path_of(k)) for k in kinds]
    if len(paths) != len(w_codes):
        raise ValueError("one MAC path per element required")

    accs: dict = {}
    for w, a, p in zip(w_codes, a_codes, paths):
        if p == FIXP:
            acc = accs.get(p) or fixp_accumulator(fixp_width)
            accs[p] = mac_fixp_fixp(w, a, acc)
        else:
            acc = accs.get(p) or posit_accumulator(p, posit_width)
            accs[p] = mac_posit_fixp(w, a, acc, p)

    total = Fraction(0)
    for p, acc in accs.items():
        part = acc.exact
        if p == FIXP:
            part *= Fraction(fixp_step) * Fraction(fixp_scale)
        total += part
    return DotResult(total * Fraction(act_scale), accs)


# ---------------------------------------------------------------- energy


@dataclass(frozen=True)
class EnergyModel:
    posit_mac_overhead: float = 0.30
    compute_share: float = 0.10
    e_fixp_mac: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.compute_share <= 1.0:
            raise ValueError("compute_share must lie in [0, 1]")
        if self.posit_mac_overhead < 0:
            raise ValueError("posit_mac_overhead must be non-negative")

    def overhead(self, posit_fraction: float) -> float:
        """Fraction of total system energy added by Posit MACs."""
        return posit_fraction * self.posit_mac_overhead * self.compute_share


@dataclass
class LayerMacs:
    layer_id: str
    total_macs: int
    posit_macs: int

    def __post_init__(self):
        if not 0 <= self.posit_macs <= self.total_macs:
            raise ValueError(f"{self.layer_id}: posit MACs must lie within 0..total")


@dataclass
class MacTrace:
    layers: list[LayerMacs] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(l.total_macs for l in self.layers)

    @property
    def posit_macs(self) -> int:
        return sum(l.posit_macs for l in self.layers)


def energy_report(trace: MacTrace, em: EnergyModel = EnergyModel()) -> dict:
    total = trace.total_macs
    if total == 0:
        raise UndefinedTrace("trace has no MAC operations; overhead is undefined")
    frac = trace.posit_macs / total
    per_layer = []
    for l in trace.layers:
        energy = em.e_fixp_mac * (l.total_macs + l.posit_macs * em.posit_mac_overhead)
        per_layer.append(
            {"layer_id": l.layer_id, "total_macs": l.total_macs, "posit_macs": l.posit_macs, "mac_energy": energy}
        )
    overhead = em.overhead(frac)
    return {
        "per_layer": per_layer,
        "posit_mac_fraction": frac,
        "overhead_fraction": overhead,
        "overhead_pct": 100.0 * overhead,
    }


# ---------------------------------------------------------------- trace files


def write_trace(path, records):
    """One JSON object per line: layer_id, w_code, variant, a_code."""
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({k: r[k] for k in ("layer_id", "w_code", "variant", "a_code")}) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def replay_trace(records) -> tuple[MacTrace, int]:
    """Re-run each recorded MAC against an exact oracle.

    Returns per-layer counts and the number of mismatching products.
    """
    counts: dict[str, list[int]] = {}
    mismatches = 0
    for r in records:
        path = _path_of(r["variant"])
        w, a = int(r["w_code"]), int(r["a_code"])
        c = counts.setdefault(r["layer_id"], [0, 0])
        c[0] += 1
        if path == FIXP:
            got = Fraction(fixp_product(w, a))
            want = Fraction(w * a)
        else:
            c[1] += 1
            got = Fraction(posit_product(w, a)) * Fraction(2) ** (-4 - path.shift)
            raw = posit_decode_raw(w, path)
            want = Fraction(0) if raw.zero else raw.sign * Fraction(2) ** raw.exp * a
        mismatches += got != want
    trace = MacTrace([LayerMacs(k, t, p) for k, (t, p) in counts.items()])
    return trace, mismatches
