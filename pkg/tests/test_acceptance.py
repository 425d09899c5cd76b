"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section of the terminal summary for the per-criterion PASS/FAIL lines.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from mixcomp.engine import Conv2d, Dense, Flatten, Model, Pact, ReLU, forward
from mixcomp.io import dumps_json
from mixcomp.macsim import FIXP, EnergyModel, dot_product_mixed, mac_posit_fixp, posit_accumulator
from mixcomp.pipeline import RunConfig, run_experiment
from mixcomp.posit import NAR_BITS, ScaleVariant, posit_decode, posit_quantize, posit_table, signed_code
from mixcomp.quantize import PositGrid, fixp_dequantize, posit_grad, posit_quantize_weights, posit_surrogate
from mixcomp.sensitivity import LayerStats, select_layers
from oracles import DIVISOR, fd_check, posit4_value, reference_decode

V = ScaleVariant
NON_NAR = [c for c in range(16) if c != NAR_BITS]
SEEDS = (0, 1, 2)


def timed(limit_s):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()
            return self

        def __exit__(self, *exc):
            self.elapsed = time.perf_counter() - self.t
            if exc[0] is None:
                assert self.elapsed < limit_s, f"took {self.elapsed:.2f}s, limit {limit_s}s"

    return _T()


@pytest.mark.criterion(1, "posit table exactness")
def test_criterion_1_posit_table():
    with timed(1.0):
        expected = [-16, -4, -2, -1, -0.5, -0.25, -0.0625, 0, 0.0625, 0.25, 0.5, 1, 2, 4, 16]
        assert posit_table(V.UNIT).tolist() == expected
        for code in range(16):
            ref = reference_decode(code, 4, 1)
            got = posit_decode(code)
            assert math.isnan(got) if ref is None else Fraction(got) == ref


@pytest.mark.criterion(2, "codec round trip and monotonicity")
def test_criterion_2_round_trip():
    with timed(1.0):
        pairs = 0
        for v in V:
            for code in NON_NAR:
                assert posit_quantize(posit_decode(code, v), v) == code
                pairs += 1
            ordered = sorted(NON_NAR, key=signed_code)
            vals = [posit_decode(c, v) for c in ordered]
            assert all(a < b for a, b in zip(vals, vals[1:]))
        assert pairs == 45


def _exact_dot(w, kinds, a, act_scale, fixp_scale):
    # Every posit value is a multiple of 1/128, so each path sums exact
    # integer numerators and reads out once as a rational.
    posit_num = 0
    fixp_sum = 0
    for wi, k, ai in zip(w, kinds, a):
        if k == FIXP:
            fixp_sum += wi * ai
        else:
            posit_num += _POSIT_NUM[k][wi] * ai
    total = Fraction(posit_num, 128) + Fraction(fixp_sum, 4) * Fraction(fixp_scale)
    return total * Fraction(act_scale)


_POSIT_NUM = {}
for _lab in DIVISOR:
    _POSIT_NUM[_lab] = {}
    for _c in NON_NAR:
        _v = posit4_value(_c, _lab) * 128
        assert _v.denominator == 1
        _POSIT_NUM[_lab][_c] = int(_v)


@pytest.mark.criterion(3, "MAC differential oracle")
def test_criterion_3_mac_oracle():
    with timed(10.0):
        cases = 0
        for v in V:
            for w in NON_NAR:
                for a in range(16):
                    acc = mac_posit_fixp(w, a, posit_accumulator(v), v)
                    assert not acc.saturated
                    assert acc.exact == posit4_value(w, v.label) * a
                    cases += 1
        assert cases == 720

        rng = np.random.default_rng(2024)
        labels = [FIXP, "unit", "sc4", "sc8"]
        mismatches = 0
        for _ in range(10_000):
            kinds = [labels[i] for i in rng.integers(0, 4, 64)]
            raw = rng.integers(0, 15, 64)
            w = [int(r) - 7 if k == FIXP else NON_NAR[int(r)] for r, k in zip(raw, kinds)]
            a = rng.integers(0, 16, 64).tolist()
            act_scale, fixp_scale = float(rng.uniform(0.01, 2)), float(rng.uniform(0.01, 2))
            res = dot_product_mixed(w, kinds, a, act_scale, fixp_scale)
            if not res.saturated:
                mismatches += res.exact != _exact_dot(w, kinds, a, act_scale, fixp_scale)
        assert mismatches == 0


@pytest.mark.criterion(4, "gradient checks")
def test_criterion_4_gradients():
    with timed(30.0):
        rng = np.random.default_rng(11)
        for trial in range(5):
            d_in, d_h, n_cls = rng.integers(2, 7, 3)
            dense = Model(
                [
                    Dense("a", rng.normal(size=(d_h, d_in)), rng.normal(size=d_h)),
                    ReLU("r"),
                    Dense("b", rng.normal(size=(n_cls, d_h)), rng.normal(size=n_cls)),
                ],
                (int(d_in),),
                int(n_cls),
            )
            fd_check(dense, rng.normal(size=(4, d_in)), rng.integers(0, n_cls, 4), seed=trial)

            c_in, k = int(rng.integers(1, 3)), int(rng.integers(1, 4))
            padding = ["same", "valid"][trial % 2]
            ho = 5 if padding == "same" else 6 - k
            conv = Model(
                [
                    Conv2d("c", rng.normal(size=(2, c_in, k, k)), rng.normal(size=2), padding),
                    ReLU("r"),
                    Flatten("f"),
                    Dense("d", rng.normal(size=(3, 2 * ho * ho)), np.zeros(3)),
                ],
                (c_in, 5, 5),
                3,
            )
            fd_check(conv, rng.normal(size=(2, c_in, 5, 5)), rng.integers(0, 3, 2), seed=trial)

            while True:
                pact = Model(
                    [
                        Dense("a", rng.normal(size=(5, 3)), rng.normal(size=5)),
                        Pact("p", alpha=1.0, n_bits=None),
                        Dense("b", rng.normal(size=(3, 5)), rng.normal(size=3)),
                    ],
                    (3,),
                    3,
                )
                x = rng.normal(size=(4, 3))
                pre = forward(pact, x)[1].entries[1][0]
                if np.min(np.abs(pre)) > 1e-3 and np.min(np.abs(pre - 1.0)) > 1e-3:
                    break
            fd_check(pact, x, rng.integers(0, 3, 4), seed=trial)

        for v in V:
            g = PositGrid.from_variant(v)
            a = g.alphas
            i = rng.integers(0, len(a) - 1, 1000)
            d = a[i + 1] - a[i]
            x = a[i] + d * rng.uniform(0.05, 0.95, 1000)
            h = 1e-6 * d
            fd = (posit_surrogate(x + h, g) - posit_surrogate(x - h, g)) / (2 * h)
            ana = posit_grad(x, g)
            assert np.max(np.abs(fd - ana) / np.abs(ana)) < 1e-6
            for lo, hi in zip(a[:-1], a[1:]):
                ratio = posit_grad(lo, g) / posit_grad(0.5 * (lo + hi), g)
                assert abs(ratio - 1 / math.cosh(2.5) ** 2) < 1e-3


def _mean_abs(q, x):
    return float(np.mean(np.abs(q - x)))


@pytest.mark.criterion(5, "quantization-error ordering")
def test_criterion_5_error_ordering():
    # N(mean, variance): variance 0.04 -> sigma 0.2, variance 0.25 -> sigma 0.5
    lines = []
    ok = True
    with timed(10.0):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            x1 = rng.normal(0.0, math.sqrt(0.04), 100_000)
            x2 = rng.normal(0.0, math.sqrt(0.25), 100_000)
            f1, s8 = _mean_abs(fixp_dequantize(x1), x1), _mean_abs(posit_quantize_weights(x1, V.SC8), x1)
            f2, s4 = _mean_abs(fixp_dequantize(x2), x2), _mean_abs(posit_quantize_weights(x2, V.SC4), x2)
            lines.append(f"seed {seed}: var 0.04 sc8 {s8:.5f} vs fixp {f1:.5f}; var 0.25 sc4 {s4:.5f} vs fixp {f2:.5f}")
            ok &= s8 < f1 and s4 < f2
    print("\n".join(lines))
    assert ok, "ordering violated:\n" + "\n".join(lines)


def _hand_traced_instances():
    def mk(scores, sizes, s8=None):
        s8 = s8 or scores
        return [LayerStats(f"L{i}", i, n, a, b) for i, (a, b, n) in enumerate(zip(scores, s8, sizes))]

    return [
        # (stats, eta, skip_nonpositive, expected posit layers, expected count)
        (mk([0.5, 0.2, 0.1], [50, 30, 40]), 0.1, True, [("L0", V.SC4)], 50),
        (mk([0.1, 0.7, 0.3], [5, 5, 5]), 0.0, True, [("L1", V.SC4)], 5),
        (mk([0.4, 0.3, 0.2, 0.1], [10, 10, 10, 70]), 0.25, True, [("L0", V.SC4), ("L1", V.SC4), ("L2", V.SC4)], 30),
        (mk([0.3, -0.1, 0.3, 0.0], [20, 20, 20, 40], [0.1, -0.2, 0.35, 0.0]), 0.5, False,
         [("L2", V.SC8), ("L0", V.SC4), ("L3", V.SC4)], 80),
        (mk([0.1, -0.2, 0.3, 0.0], [5, 5, 5, 5], [0.2, -0.3, 0.1, -0.1]), 1.0, True,
         [("L2", V.SC4), ("L0", V.SC8)], 10),
    ]


def _criterion_6_reports():
    out = []
    for stats, eta, skip, _, _ in _hand_traced_instances():
        plan = select_layers(stats, eta, skip_nonpositive=skip)
        out.append(
            json.dumps(
                {"posit": [[n, v.label] for n, v in plan.posit_layers], "fixp": plan.fixp_layers,
                 "count": plan.posit_param_count},
                sort_keys=True,
            )
        )
    return out


@pytest.mark.criterion(6, "layer selection trace equivalence")
def test_criterion_6_select_layers():
    with timed(1.0):
        for stats, eta, skip, want, count in _hand_traced_instances():
            plan = select_layers(stats, eta, skip_nonpositive=skip)
            assert plan.posit_layers == want
            assert plan.posit_param_count == count


@pytest.mark.criterion(7, "energy model")
def test_criterion_7_energy():
    with timed(1.0):
        em = EnergyModel()
        assert abs(100 * em.overhead(0.083) - 0.249) <= 0.01
        assert 100 * em.overhead(1.0) == pytest.approx(3.0, abs=1e-12)


def _experiment_report():
    rows = [run_experiment(RunConfig(seed=s)) for s in SEEDS]
    return rows, dumps_json({"runs": rows})


@pytest.fixture(scope="module")
def experiment():
    t = time.perf_counter()
    rows, text = _experiment_report()
    return rows, text, time.perf_counter() - t


@pytest.mark.criterion(8, "desk-scale mixed vs FixP4 experiment")
def test_criterion_8_experiment(experiment):
    rows, _, elapsed = experiment
    assert elapsed < 600
    for r in rows:
        print(f"seed {r['seed']}: fp32 {r['fp32']:.4f} fixp4 {r['fixp4']:.4f} posit4 {r['posit4']:.4f} "
              f"mixed {r['mixed']:.4f} posit fraction {r['posit_param_fraction']:.4f}")
    n_params = rows[0]["sensitivity"]["N"]
    assert 40_000 <= n_params <= 60_000
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("fp32", "fixp4", "mixed")}
    assert mean["mixed"] >= mean["fixp4"] - 0.002
    for r in rows:
        assert r["posit_param_fraction"] <= 0.10 + r["last_admitted_share"] + 1e-12
    assert mean["fp32"] >= mean["fixp4"] - 0.05
    assert mean["fp32"] >= mean["mixed"] - 0.05


@pytest.mark.criterion(9, "reproducibility of reports")
def test_criterion_9_reproducibility(experiment):
    _, first_text, _ = experiment
    _, second_text = _experiment_report()
    assert first_text.encode() == second_text.encode()
    assert _criterion_6_reports() == _criterion_6_reports()
