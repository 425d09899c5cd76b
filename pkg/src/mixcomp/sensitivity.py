"""Per-layer sensitivity scores and greedy Posit layer selection.

For a layer with weights ``w`` (``n`` elements) and loss gradient ``g``, the
score of a scaled Posit variant is

    (||Q_fixp(w) - w|| - ||Q_posit(w) - w||) * ||g|| / n

using L2 norms over the flattened tensor and dequantized weights on both
sides. A layer's score is the better of the sc4/sc8 variants. Layers are
admitted to Posit in descending score order until the admitted parameter
count exceeds ``eta * N``; the check runs after each admission, so the last
admitted layer may overshoot the budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ContractError, Model
from .posit import ScaleVariant
from .quantize import FixPParams, fixp_dequantize, posit_quantize_weights

CANDIDATE_VARIANTS = (ScaleVariant.SC4, ScaleVariant.SC8)


@dataclass
class LayerStats:
    layer_id: str
    index: int
    n_l: int
    s_sc4: float
    s_sc8: float

    @property
    def s_l(self) -> float:
        return max(self.s_sc4, self.s_sc8)

    @property
    def variant(self) -> ScaleVariant:
        # ties go to sc4
        return ScaleVariant.SC8 if self.s_sc8 > self.s_sc4 else ScaleVariant.SC4


@dataclass
class AssignmentPlan:
    eta: float
    posit_layers: list[tuple[str, ScaleVariant]] = field(default_factory=list)
    fixp_layers: list[str] = field(default_factory=list)
    posit_param_count: int = 0
    total_param_count: int = 0

    @property
    def posit_fraction(self) -> float:
        return self.posit_param_count / self.total_param_count if self.total_param_count else 0.0

    def variant_of(self, layer_id: str) -> ScaleVariant | None:
        return dict(self.posit_layers).get(layer_id)


def quantization_errors(w, variant: ScaleVariant, fixp: FixPParams = FixPParams()):
    """L2 errors of FixP4 and Posit4 for the same tensor, in weight units."""
    w = np.asarray(w, dtype=np.float64).ravel()
    e_fixp = float(np.linalg.norm(fixp_dequantize(w, fixp) - w))
    e_posit = float(np.linalg.norm(posit_quantize_weights(w, variant) - w))
    return e_fixp, e_posit


def layer_sensitivity(w, grad, variant: ScaleVariant, fixp: FixPParams = FixPParams()) -> float:
    w = np.asarray(w, dtype=np.float64).ravel()
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if w.size != grad.size:
        raise ContractError(f"weight has {w.size} elements but gradient has {grad.size}")
    if w.size == 0:
        raise ContractError("layer has no parameters")
    e_fixp, e_posit = quantization_errors(w, variant, fixp)
    return (e_fixp - e_posit) * float(np.linalg.norm(grad)) / w.size


def compute_all_sensitivities(model: Model, gradients, fixp: FixPParams = FixPParams()) -> list[LayerStats]:
    """``gradients`` maps layer name to ``{"W": grad, ...}`` (or directly to the array)."""
    stats = []
    for i, layer in enumerate(model.quant_layers()):
        g = gradients.get(layer.name)
        if g is None:
            raise ContractError(f"no gradient for layer {layer.name}")
        g = g["W"] if isinstance(g, dict) else g
        w = layer.params["W"]
        s = {v: layer_sensitivity(w, g, v, fixp) for v in CANDIDATE_VARIANTS}
        stats.append(LayerStats(layer.name, i, w.size, s[ScaleVariant.SC4], s[ScaleVariant.SC8]))
    return stats


def select_layers(stats: list[LayerStats], eta: float = 0.1, skip_nonpositive: bool = True) -> AssignmentPlan:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be within [0, 1], got {eta}")
    total = sum(s.n_l for s in stats)
    plan = AssignmentPlan(eta=eta, total_param_count=total)
    queue = sorted(stats, key=lambda s: (-s.s_l, s.index))
    if skip_nonpositive:
        queue = [s for s in queue if s.s_l > 0]
    budget = eta * total
    chosen = set()
    for s in queue:
        plan.posit_layers.append((s.layer_id, s.variant))
        plan.posit_param_count += s.n_l
        chosen.add(s.layer_id)
        if plan.posit_param_count > budget:
            break
    plan.fixp_layers = [s.layer_id for s in sorted(stats, key=lambda s: s.index) if s.layer_id not in chosen]
    return plan


def sensitivity_report(stats: list[LayerStats], plan: AssignmentPlan) -> dict:
    """JSON-ready report of scores and the selected plan."""
    chosen = dict(plan.posit_layers)
    layers = []
    for s in sorted(stats, key=lambda s: s.index):
        layers.append(
            {
                "layer_id": s.layer_id,
                "n_l": s.n_l,
                "s_sc4": s.s_sc4,
                "s_sc8": s.s_sc8,
                "s_l": s.s_l,
                "chosen": "posit4" if s.layer_id in chosen else "fixp4",
                "variant": chosen[s.layer_id].label if s.layer_id in chosen else None,
            }
        )
    return {
        "layers": layers,
        "eta": plan.eta,
        "N": plan.total_param_count,
        "posit_param_count": plan.posit_param_count,
        "posit_param_fraction": plan.posit_fraction,
    }


def plan_from_report(report: dict) -> AssignmentPlan:
    plan = AssignmentPlan(eta=report["eta"], total_param_count=report["N"])
    ranked = sorted(enumerate(report["layers"]), key=lambda ie: (-ie[1]["s_l"], ie[0]))
    for _, entry in ranked:
        if entry["chosen"] == "posit4":
            plan.posit_layers.append((entry["layer_id"], ScaleVariant.from_label(entry["variant"])))
            plan.posit_param_count += entry["n_l"]
    posit = dict(plan.posit_layers)
    plan.fixp_layers = [e["layer_id"] for e in report["layers"] if e["layer_id"] not in posit]
    return plan
