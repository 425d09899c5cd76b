"""End-to-end flow: analyze -> quantize -> retrain -> evaluate, plus MAC checks and energy."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .engine import (
    Conv2d,
    Flatten,
    Model,
    Pact,
    ReLU,
    TrainConfig,
    build_mlp,
    evaluate,
    full_gradients,
    train,
)
from .io import DataError, Dataset, DatasetSpec, load_dataset
from .macsim import (
    FIXP,
    FIXP_ACC_WIDTH,
    POSIT_ACC_WIDTH,
    EnergyModel,
    LayerMacs,
    MacTrace,
    energy_report,
    fixp_accumulator,
    posit_accumulator,
    posit_product,
)
from .posit import posit_decode_array, posit_quantize_array
from .quantize import FixP4, FixPParams, Posit4, fixp_codes
from .sensitivity import (
    AssignmentPlan,
    LayerStats,
    compute_all_sensitivities,
    select_layers,
    sensitivity_report,
)


@dataclass
class RunConfig:
    eta: float = 0.1
    seed: int = 0
    epochs: int = 30
    qat_epochs: int = 5
    batch_size: int = 128
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    qat_lr_max: float = 5e-4
    weight_decay: float = 1e-4
    posit_estimator: str = "tanh"
    hidden: tuple = (256, 128)
    fixp_n: int = 4
    fixp_int_bits: int = 2
    fixp_frac_bits: int = 2
    skip_nonpositive: bool = True
    quantize_first_last: bool = True
    calibrate_alpha: bool = True
    alpha_percentile: float = 99.9
    calib_batches: int | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.epochs < 1 or self.qat_epochs < 0:
            raise ValueError("epochs must be >= 1 and qat_epochs >= 0")
        if not 0 < self.alpha_percentile <= 100:
            raise ValueError("alpha_percentile must lie in (0, 100]")
        self.fixp_params()
        self.train_config()

    def fixp_params(self) -> FixPParams:
        # signed two's-complement range of the int.frac split
        step = 2.0**-self.fixp_frac_bits
        low = -(2.0 ** (self.fixp_int_bits - 1))
        return FixPParams(self.fixp_n, self.fixp_int_bits, self.fixp_frac_bits, low, -low - step)

    def train_config(self, qat=False) -> TrainConfig:
        if qat:
            return TrainConfig(
                max(self.qat_epochs, 1), self.batch_size, self.qat_lr_max, self.lr_min,
                weight_decay=self.weight_decay, seed=self.seed, posit_estimator=self.posit_estimator,
            )
        return TrainConfig(
            self.epochs, self.batch_size, self.lr_max, self.lr_min,
            weight_decay=self.weight_decay, seed=self.seed, posit_estimator=self.posit_estimator,
        )

    @classmethod
    def load(cls, path=None, **overrides) -> "RunConfig":
        """JSON config file, then non-None overrides on top."""
        d = {}
        if path is not None:
            with open(path) as f:
                d = json.load(f)
            unknown = set(d) - {f.name for f in fields(cls)}
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# ---------------------------------------------------------------- analysis


def analyze(model: Model, data: Dataset, cfg: RunConfig):
    """Full-precision gradients over the calibration set, scores, and plan."""
    grads = full_gradients(model, data.x_train, data.y_train, cfg.batch_size, cfg.calib_batches)
    stats = compute_all_sensitivities(model, grads, cfg.fixp_params())
    plan = select_layers(stats, cfg.eta, cfg.skip_nonpositive)
    return stats, plan, sensitivity_report(stats, plan)


def calibrate_pact(model: Model, x, percentile=99.9):
    """Set each PACT alpha to a percentile of its full-precision input."""
    h = np.asarray(x, dtype=np.float64)
    for l in model.layers:
        if isinstance(l, Pact):
            pos = h[h > 0]
            if pos.size:
                l.params["alpha"] = np.array(max(float(np.percentile(pos, percentile)), 1e-3))
        h, _ = l.forward(h, False)
    model.version += 1


def _exempt(model: Model, cfg: RunConfig) -> set[str]:
    if cfg.quantize_first_last:
        return set()
    q = model.quant_layers()
    return {q[0].name, q[-1].name} if q else set()


def apply_schemes(model: Model, schemes: dict, cfg: RunConfig, act_bits=4):
    """Attach ``{layer_name: scheme}``; unnamed layers stay full precision."""
    skip = _exempt(model, cfg)
    for l in model.quant_layers():
        l.scheme = None if l.name in skip else schemes.get(l.name)
        l.fixp_scale = None
        l.refresh_scale()
    for l in model.layers:
        if isinstance(l, Pact):
            l.n_bits = act_bits
    model.meta["quantize_first_last"] = cfg.quantize_first_last
    model.version += 1


def schemes_for(kind: str, model: Model, stats: list[LayerStats], plan: AssignmentPlan, cfg: RunConfig) -> dict:
    """Per-layer schemes for ``fixp4`` (all FixP), ``posit4`` (all Posit), or ``mixed``."""
    fx = FixP4(cfg.fixp_params())
    names = [l.name for l in model.quant_layers()]
    if kind == "fixp4":
        return {n: fx for n in names}
    if kind == "posit4":
        by_name = {s.layer_id: s for s in stats}
        return {n: Posit4(by_name[n].variant) for n in names}
    if kind == "mixed":
        posit = dict(plan.posit_layers)
        return {n: Posit4(posit[n]) if n in posit else fx for n in names}
    raise ValueError(f"unknown quantization kind {kind!r}")


def quantize_model(model: Model, plan: AssignmentPlan, cfg: RunConfig, x_calib=None) -> Model:
    """Copy of ``model`` with the plan's schemes attached."""
    q = copy.deepcopy(model)
    if cfg.calibrate_alpha and x_calib is not None:
        calibrate_pact(q, x_calib, cfg.alpha_percentile)
    posit = dict(plan.posit_layers)
    known = {l.name for l in q.quant_layers()}
    missing = (set(posit) | set(plan.fixp_layers)) - known
    if missing:
        raise DataError(f"plan names layers absent from the model: {sorted(missing)}")
    fx = FixP4(cfg.fixp_params())
    apply_schemes(q, {n: Posit4(posit[n]) if n in posit else fx for n in known}, cfg)
    q.meta["plan"] = {"eta": plan.eta, "posit_layers": [[n, v.label] for n, v in plan.posit_layers]}
    return q


def snap_weights(model: Model):
    """Replace shadow weights by their quantized values and round to storage precision."""
    for l in model.quant_layers():
        if l.scheme is not None:
            l.refresh_scale()
            W, _ = l.effective_weight(True)
            l.params["W"] = W.copy()
    model.to_storage_precision()


# ---------------------------------------------------------------- energy


def mac_trace(model: Model) -> MacTrace:
    counts = model.mac_counts()
    layers = []
    for l in model.quant_layers():
        total = counts[l.name]
        layers.append(LayerMacs(l.name, total, total if isinstance(l.scheme, Posit4) else 0))
    return MacTrace(layers)


def energy_summary(model: Model, em: EnergyModel = EnergyModel()) -> dict:
    rep = energy_report(mac_trace(model), em)
    total = model.n_quant_params()
    posit_params = sum(l.n_params for l in model.quant_layers() if isinstance(l.scheme, Posit4))
    frac = posit_params / total if total else 0.0
    rep["posit_param_fraction"] = frac
    rep["overhead_pct_by_params"] = 100.0 * em.overhead(frac)
    return rep


# ---------------------------------------------------------------- MAC verification


_POSIT_LUT = np.array([[0 if w == 8 else posit_product(w, a) for a in range(16)] for w in range(16)], dtype=np.int64)


def _accumulate(prods, width, sequential):
    """Row-wise sums along the last axis with saturation; returns (acc, saturated)."""
    hi, lo = (1 << (width - 1)) - 1, -(1 << (width - 1))
    csum = np.cumsum(prods, axis=-1)
    acc = csum[..., -1] if prods.shape[-1] else np.zeros(prods.shape[:-1], dtype=np.int64)
    over = (csum > hi).any(axis=-1) | (csum < lo).any(axis=-1) if prods.shape[-1] else np.zeros(acc.shape, bool)
    sat = np.zeros(acc.shape, dtype=bool)
    for idx in zip(*np.nonzero(over)):
        a = sequential()
        for p in prods[idx]:
            a = a.add(int(p))
        acc[idx], sat[idx] = a.value, a.saturated
    return acc, sat


def _weight_codes(layer):
    W = layer.params["W"].reshape(layer.params["W"].shape[0], -1)
    s = layer.scheme
    if isinstance(s, Posit4):
        codes = posit_quantize_array(W, s.variant).astype(np.int64)
        values = posit_decode_array(codes, s.variant)
        return codes, values, s.variant, 2.0 ** (-4 - s.variant.shift)
    codes = fixp_codes(W, layer.fixp_scale, s.params)
    return codes, codes.astype(np.float64), FIXP, s.params.step * layer.fixp_scale


def verify_layer(layer, a_codes, x_q, act_step, posit_width=POSIT_ACC_WIDTH, fixp_width=FIXP_ACC_WIDTH, records=None, trace_limit=0):
    """Run every dot product of ``layer`` on integer activation rows through the MAC model."""
    w_codes, w_values, path, w_unit = _weight_codes(layer)
    Weff, _ = layer.effective_weight(True)
    engine = x_q @ Weff.reshape(Weff.shape[0], -1).T
    if path == FIXP:
        prods = a_codes[:, None, :] * w_codes[None, :, :]
        acc, sat = _accumulate(prods, fixp_width, lambda: fixp_accumulator(fixp_width))
        lsb = 1.0
    else:
        prods = _POSIT_LUT[w_codes[None, :, :], a_codes[:, None, :]]
        acc, sat = _accumulate(prods, posit_width, lambda: posit_accumulator(path, posit_width))
        lsb = 2.0 ** (-4 - path.shift)
        w_unit = 1.0
    # exact oracle: decoded operand values, exact in float64 at these magnitudes
    oracle = (a_codes.astype(np.float64) @ w_values.T) / lsb
    ulp = lsb * w_unit * act_step
    mac_real = acc * ulp
    ok = ~sat
    exact_gap = np.abs(oracle - acc)[ok]
    engine_gap = (np.abs(engine - mac_real) / ulp)[ok]
    if records is not None and len(records) < trace_limit:
        label = FIXP if path == FIXP else path.label
        n, o, k = a_codes.shape[0], w_codes.shape[0], w_codes.shape[1]
        for flat in range(min(n * o * k, trace_limit - len(records))):
            i, rem = divmod(flat, o * k)
            j, m = divmod(rem, k)
            records.append(
                {"layer_id": layer.name, "w_code": int(w_codes[j, m]), "variant": label, "a_code": int(a_codes[i, m])}
            )
    return {
        "layer_id": layer.name,
        "path": FIXP if path == FIXP else path.label,
        "dot_products": int(acc.size),
        "macs": int(prods.size),
        "saturated": int(sat.sum()),
        "max_exact_discrepancy": float(exact_gap.max()) if exact_gap.size else 0.0,
        "max_discrepancy_ulp": float(engine_gap.max()) if engine_gap.size else 0.0,
    }


def macverify(model: Model, x, posit_width=POSIT_ACC_WIDTH, fixp_width=FIXP_ACC_WIDTH, trace_limit=0):
    """Compare every quantized dot product of one forward pass with the MAC simulator.

    Returns ``(summary, trace_records)``. ``passed`` requires zero exact
    discrepancy and at most one sub-unit ULP against the float engine path.
    """
    x = np.asarray(x, dtype=np.float64)
    layers_out = []
    records: list[dict] | None = [] if trace_limit else None
    if len(x):
        codes, step = None, None
        for l in model.layers:
            if isinstance(l, Pact):
                y, c = l.forward(x, True)
                codes = c[2]
                step = float(l.params["alpha"]) / l.pact_params.levels
            elif isinstance(l, Flatten):
                y, _ = l.forward(x, True)
                codes = codes.reshape(len(codes), -1) if codes is not None else None
            elif isinstance(l, ReLU):
                y, _ = l.forward(x, True)
            elif l.quantizable:
                if codes is None or l.scheme is None:
                    raise DataError(f"layer {l.name} lacks a quantized scheme or 4-bit activation input")
                if isinstance(l, Conv2d):
                    a_rows = l.im2col(codes.astype(np.float64))[0].astype(np.int64)
                    x_rows = l.im2col(x)[0]
                else:
                    a_rows, x_rows = codes.astype(np.int64), x
                layers_out.append(verify_layer(l, a_rows, x_rows, step, posit_width, fixp_width, records, trace_limit))
                y, _ = l.forward(x, True)
                codes = None
            else:
                y, _ = l.forward(x, True)
                codes = None
            x = y
    max_ulp = max((r["max_discrepancy_ulp"] for r in layers_out), default=0.0)
    max_exact = max((r["max_exact_discrepancy"] for r in layers_out), default=0.0)
    summary = {
        "layers": layers_out,
        "samples": int(len(x)),
        "dot_products": sum(r["dot_products"] for r in layers_out),
        "macs": sum(r["macs"] for r in layers_out),
        "saturation_count": sum(r["saturated"] for r in layers_out),
        "max_exact_discrepancy": max_exact,
        "max_discrepancy_ulp": round(max_ulp, 6),
        "passed": max_exact == 0.0 and max_ulp <= 1.0,
    }
    return summary, records or []


# ---------------------------------------------------------------- experiment


def experiment_dataset_spec(seed: int) -> DatasetSpec:
    return DatasetSpec(seed=seed)


def run_experiment(cfg: RunConfig, spec: DatasetSpec | None = None) -> dict:
    """Train fp32, then quantize FixP4-all / Posit4-all / mixed, retrain, evaluate."""
    spec = spec or experiment_dataset_spec(cfg.seed)
    data = load_dataset(spec)
    model = build_mlp(data.input_shape[0], cfg.hidden, data.n_classes, seed=cfg.seed)
    train(model, data.x_train, data.y_train, cfg.train_config())
    row = {"seed": cfg.seed, "fp32": evaluate(model, data.x_test, data.y_test)}
    stats, plan, report = analyze(model, data, cfg)
    for kind in ("fixp4", "posit4", "mixed"):
        q = copy.deepcopy(model)
        if cfg.calibrate_alpha:
            calibrate_pact(q, data.x_train, cfg.alpha_percentile)
        apply_schemes(q, schemes_for(kind, q, stats, plan, cfg), cfg)
        row[f"{kind}_ptq"] = evaluate(q, data.x_test, data.y_test, quantized=True)
        if cfg.qat_epochs:
            train(q, data.x_train, data.y_train, cfg.train_config(qat=True), quantized=True)
        row[kind] = evaluate(q, data.x_test, data.y_test, quantized=True)
    n = plan.total_param_count
    row["posit_param_fraction"] = plan.posit_fraction
    row["last_admitted_share"] = (
        dict((s.layer_id, s.n_l) for s in stats)[plan.posit_layers[-1][0]] / n if plan.posit_layers else 0.0
    )
    row["posit_layers"] = [[name, v.label] for name, v in plan.posit_layers]
    row["sensitivity"] = report
    row["quantize_first_last"] = cfg.quantize_first_last
    return row


TABLE_COLUMNS = ["seed", "fp32", "fixp4", "posit4", "mixed", "posit_param_fraction"]


def four_way_eval(model: Model, data: Dataset, cfg: RunConfig) -> dict:
    """fp32 plus post-training FixP4 / Posit4 / mixed accuracy for a full-precision model."""
    row = {"fp32": evaluate(model, data.x_test, data.y_test)}
    stats, plan, _ = analyze(model, data, cfg)
    for kind in ("fixp4", "posit4", "mixed"):
        q = copy.deepcopy(model)
        if cfg.calibrate_alpha:
            calibrate_pact(q, data.x_train, cfg.alpha_percentile)
        apply_schemes(q, schemes_for(kind, q, stats, plan, cfg), cfg)
        row[kind] = evaluate(q, data.x_test, data.y_test, quantized=True)
    row["posit_param_fraction"] = plan.posit_fraction
    return row
