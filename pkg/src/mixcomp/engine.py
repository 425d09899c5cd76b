"""Small layer-wise reverse-mode engine for full-precision and fake-quantized training.

Tensors are plain float64 numpy arrays. A model is an ordered list of layers;
``forward`` records a per-layer cache and ``backward`` walks it in reverse.
Dense weights are stored ``(out, in)`` so a single sample computes ``W @ x``.
Conv weights are ``(out_c, in_c, kh, kw)`` on NCHW inputs, stride 1.

In quantized mode dense/conv layers with a scheme multiply by their
effective (dequantized) weights, and PACT layers with ``n_bits`` set emit
quantized activations. Full-precision mode bypasses every quantizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .quantize import (
    FixP4,
    PactParams,
    Posit4,
    PositGrid,
    fixp_quantize_weights,
    fixp_scale,
    pact_quantize,
    posit_grad,
    posit_quantize_weights,
    ste_grad,
)


class ContractError(ValueError):
    """Inputs violate a shape or sequencing precondition."""


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"
    quantizable = False

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x, quantized):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError


class _WeightLayer(Layer):
    quantizable = True

    def __init__(self, name, W, b, scheme=None):
        super().__init__(name)
        self.params = {"W": np.asarray(W, dtype=np.float64), "b": np.asarray(b, dtype=np.float64)}
        self.scheme: FixP4 | Posit4 | None = scheme
        self.fixp_scale: float | None = None
        self.posit_estimator = "tanh"

    @property
    def n_params(self) -> int:
        return self.params["W"].size

    def refresh_scale(self):
        """Recompute the FixP scale from the current shadow weights."""
        if isinstance(self.scheme, FixP4):
            self.fixp_scale = fixp_scale(self.params["W"], self.scheme.params)

    def effective_weight(self, quantized: bool):
        """Weight actually multiplied, and the elementwise quantizer derivative."""
        W = self.params["W"]
        s = self.scheme
        if not quantized or s is None:
            return W, None
        if isinstance(s, FixP4):
            p = s.params
            scale = self.fixp_scale if self.fixp_scale is not None else fixp_scale(W, p)
            Wq, _ = fixp_quantize_weights(W, p, scale)
            return scale * Wq, ste_grad(W / scale, p.low, p.high)
        grid = PositGrid.from_variant(s.variant)
        if self.posit_estimator == "ste":
            dq = ste_grad(W, grid.alphas[0], grid.alphas[-1])
        else:
            dq = posit_grad(W, grid)
        return posit_quantize_weights(W, s.variant), dq


class Dense(_WeightLayer):
    kind = "dense"

    def forward(self, x, quantized):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[1]:
            raise ContractError(
                f"{self.name}: expected input (N, {self.params['W'].shape[1]}), got {x.shape}"
            )
        W, dq = self.effective_weight(quantized)
        return x @ W.T + self.params["b"], (x, W, dq)

    def backward(self, dy, cache):
        x, W, dq = cache
        dW = dy.T @ x
        if dq is not None:
            dW = dW * dq
        return dy @ W, {"W": dW, "b": dy.sum(axis=0)}

    def mac_count(self, in_shape=None) -> int:
        return self.params["W"].size


class Conv2d(_WeightLayer):
    kind = "conv2d"

    def __init__(self, name, W, b, padding="same", scheme=None):
        super().__init__(name, W, b, scheme)
        if padding not in ("same", "valid"):
            raise ValueError("padding must be 'same' or 'valid'")
        self.padding = padding

    def _pads(self):
        kh, kw = self.params["W"].shape[2:]
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)

    def im2col(self, x):
        """Patches as rows ``(N*Ho*Wo, C*kh*kw)`` plus output spatial size."""
        kh, kw = self.params["W"].shape[2:]
        ph, pw = self._pads()
        xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N C Ho Wo kh kw
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        return cols, (ho, wo)

    def forward(self, x, quantized):
        W = self.params["W"]
        if x.ndim != 4 or x.shape[1] != W.shape[1]:
            raise ContractError(f"{self.name}: expected (N, {W.shape[1]}, H, W) input, got {x.shape}")
        Weff, dq = self.effective_weight(quantized)
        cols, (ho, wo) = self.im2col(x)
        out = cols @ Weff.reshape(W.shape[0], -1).T + self.params["b"]
        out = out.reshape(x.shape[0], ho, wo, W.shape[0]).transpose(0, 3, 1, 2)
        return out, (x.shape, cols, Weff, dq)

    def backward(self, dy, cache):
        x_shape, cols, Weff, dq = cache
        oc, c, kh, kw = Weff.shape
        n, _, ho, wo = dy.shape
        dflat = dy.transpose(0, 2, 3, 1).reshape(-1, oc)
        dW = (dflat.T @ cols).reshape(Weff.shape)
        if dq is not None:
            dW = dW * dq
        dcols = (dflat @ Weff.reshape(oc, -1)).reshape(n, ho, wo, c, kh, kw)
        ph, pw = self._pads()
        dxp = np.zeros((n, c, x_shape[2] + sum(ph), x_shape[3] + sum(pw)))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, ph[0] : ph[0] + x_shape[2], pw[0] : pw[0] + x_shape[3]]
        return dx, {"W": dW, "b": dflat.sum(axis=0)}

    def mac_count(self, in_shape) -> int:
        """Output elements times kernel volume, for one sample of shape ``(C, H, W)``."""
        oc, c, kh, kw = self.params["W"].shape
        h, w = in_shape[1:]
        if self.padding == "valid":
            h, w = h - kh + 1, w - kw + 1
        return oc * h * w * c * kh * kw


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, quantized):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, mask):
        return dy * mask, {}


class Pact(Layer):
    """Clip to ``[0, alpha]``; in quantized mode also round to ``n_bits`` levels."""

    kind = "pact"

    def __init__(self, name, alpha=10.0, n_bits: int | None = 4):
        super().__init__(name)
        self.params = {"alpha": np.array(float(alpha))}
        self.n_bits = n_bits

    @property
    def pact_params(self) -> PactParams:
        return PactParams(float(self.params["alpha"]), self.n_bits or 4)

    def forward(self, x, quantized):
        a = float(self.params["alpha"])
        if not a > 0:
            raise TrainingDiverged(f"{self.name}: PACT alpha became non-positive ({a})")
        y = np.clip(x, 0.0, a)
        codes = None
        if quantized and self.n_bits is not None:
            codes, y = pact_quantize(y, self.pact_params)
        return y, (x, a, codes)

    def backward(self, dy, cache):
        x, a, _ = cache
        dx = dy * ((x >= 0) & (x < a))
        dalpha = np.array(float(np.sum(dy * (x >= a))))
        return dx, {"alpha": dalpha}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, quantized):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


# ---------------------------------------------------------------- model


@dataclass
class Model:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    n_classes: int
    meta: dict = field(default_factory=dict)
    version: int = 0

    def quant_layers(self) -> list[_WeightLayer]:
        return [l for l in self.layers if l.quantizable]

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def n_quant_params(self) -> int:
        return sum(l.n_params for l in self.quant_layers())

    def set_posit_estimator(self, estimator: str):
        if estimator not in ("tanh", "ste"):
            raise ValueError("posit estimator must be 'tanh' or 'ste'")
        for l in self.quant_layers():
            l.posit_estimator = estimator

    def refresh_scales(self):
        for l in self.quant_layers():
            l.refresh_scale()

    def clear_schemes(self):
        for l in self.quant_layers():
            l.scheme, l.fixp_scale = None, None
        for l in self.layers:
            if isinstance(l, Pact):
                l.n_bits = None

    def to_storage_precision(self):
        """Round every parameter through float32, as stored on disk."""
        for l in self.layers:
            for k, v in l.params.items():
                l.params[k] = v.astype(np.float32).astype(np.float64)
            if getattr(l, "fixp_scale", None) is not None:
                l.fixp_scale = float(np.float32(l.fixp_scale))
        self.version += 1

    def mac_counts(self) -> dict[str, int]:
        """Per-sample MAC operations of each dense/conv layer."""
        counts = {}
        shape = (1, *self.input_shape)
        x = np.zeros(shape)
        for l in self.layers:
            if l.quantizable:
                counts[l.name] = l.mac_count(x.shape[1:])
            x, _ = l.forward(x, False)
        return counts


def build_mlp(in_dim, hidden, n_classes, seed=0, alpha=10.0, input_alpha=1.0, act_bits=4):
    """PACT-quantized input, then ``dense -> pact`` blocks, then a dense head."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [Pact("act0", input_alpha, act_bits)]
    dims = [in_dim, *hidden, n_classes]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        W = rng.normal(0.0, math.sqrt(2.0 / a), size=(b, a))
        layers.append(Dense(f"fc{i + 1}", W, np.zeros(b)))
        if i < len(dims) - 2:
            layers.append(Pact(f"act{i + 1}", alpha, act_bits))
    return Model(layers, (in_dim,), n_classes)


def build_cnn(in_shape, channels, n_classes, kernel=3, seed=0, alpha=10.0, input_alpha=1.0, act_bits=4):
    rng = np.random.default_rng(seed)
    c, h, w = in_shape
    layers: list[Layer] = [Pact("act0", input_alpha, act_bits)]
    for i, oc in enumerate(channels):
        fan_in = c * kernel * kernel
        W = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(oc, c, kernel, kernel))
        layers += [Conv2d(f"conv{i + 1}", W, np.zeros(oc)), Pact(f"cact{i + 1}", alpha, act_bits)]
        c = oc
    layers.append(Flatten("flatten"))
    fan_in = c * h * w
    layers.append(Dense("fc", rng.normal(0.0, math.sqrt(2.0 / fan_in), (n_classes, fan_in)), np.zeros(n_classes)))
    return Model(layers, tuple(in_shape), n_classes)


# ---------------------------------------------------------------- passes


@dataclass
class Cache:
    version: int
    quantized: bool
    entries: list


def forward(model: Model, x, quantized: bool = False):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != tuple(model.input_shape):
        raise ContractError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    entries = []
    for l in model.layers:
        x, c = l.forward(x, quantized)
        if not np.all(np.isfinite(x)):
            raise TrainingDiverged(f"non-finite activations after layer {l.name}")
        entries.append(c)
    return x, Cache(model.version, quantized, entries)


def backward(model: Model, cache: Cache, loss_grad) -> dict[str, dict[str, np.ndarray]]:
    if cache.version != model.version:
        raise ContractError("stale cache: model parameters changed after forward()")
    grads = {}
    dy = np.asarray(loss_grad, dtype=np.float64)
    for l, c in zip(reversed(model.layers), reversed(cache.entries)):
        dy, g = l.backward(dy, c)
        if g:
            grads[l.name] = g
    return grads


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def loss_and_grads(model, x, y, quantized=False):
    logits, cache = forward(model, x, quantized)
    loss, d = softmax_xent(logits, y)
    return loss, logits, backward(model, cache, d)


def full_gradients(model: Model, x, y, batch_size=128, max_batches=None):
    """Full-precision gradient of the mean loss over ``(x, y)``, in fixed batch order."""
    total: dict[str, dict[str, np.ndarray]] = {}
    n = len(x)
    seen = 0
    for bi, start in enumerate(range(0, n, batch_size)):
        if max_batches is not None and bi >= max_batches:
            break
        xb, yb = x[start : start + batch_size], y[start : start + batch_size]
        _, _, g = loss_and_grads(model, xb, yb, quantized=False)
        for name, gd in g.items():
            acc = total.setdefault(name, {k: np.zeros_like(v) for k, v in gd.items()})
            for k, v in gd.items():
                acc[k] += v * len(xb)
        seen += len(xb)
    return {name: {k: v / seen for k, v in gd.items()} for name, gd in total.items()}


def evaluate(model: Model, x, y, quantized=False, batch_size=512) -> float:
    correct = 0
    for start in range(0, len(x), batch_size):
        logits, _ = forward(model, x[start : start + batch_size], quantized)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[start : start + batch_size]))
    return correct / len(x) if len(x) else float("nan")


def evaluate_loss(model: Model, x, y, quantized=False, batch_size=512) -> float:
    total = 0.0
    for start in range(0, len(x), batch_size):
        logits, _ = forward(model, x[start : start + batch_size], quantized)
        total += softmax_xent(logits, y[start : start + batch_size])[0] * len(logits[:, 0])
    return total / len(x)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    posit_estimator: str = "tanh"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.posit_estimator not in ("tanh", "ste"):
            raise ValueError("posit_estimator must be 'tanh' or 'ste'")


def cosine_lr(t, total, lr_max, lr_min):
    if total <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, model: Model, grads, lr):
        c = self.cfg
        self.t += 1
        for l in model.layers:
            g_layer = grads.get(l.name)
            if not g_layer:
                continue
            for k, g in g_layer.items():
                p = l.params[k]
                if k != "b" and c.weight_decay:
                    g = g + c.weight_decay * p
                key = (l.name, k)
                m = self.m.get(key, 0.0) * c.beta1 + (1 - c.beta1) * g
                v = self.v.get(key, 0.0) * c.beta2 + (1 - c.beta2) * g * g
                self.m[key], self.v[key] = m, v
                mh = m / (1 - c.beta1**self.t)
                vh = v / (1 - c.beta2**self.t)
                l.params[k] = p - lr * mh / (np.sqrt(vh) + c.eps)
        model.version += 1


def train(model: Model, x, y, cfg: TrainConfig, quantized=False, x_val=None, y_val=None):
    """Adam + per-step cosine schedule. Returns the per-epoch metrics history."""
    if len(x) == 0:
        raise ContractError("empty training set")
    model.set_posit_estimator(cfg.posit_estimator)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg)
    steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history = []
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        if quantized:
            model.refresh_scales()
        order = rng.permutation(len(x))
        loss_sum, correct = 0.0, 0
        lr = cosine_lr(t, total, cfg.lr_max, cfg.lr_min)
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lr = cosine_lr(t, total, cfg.lr_max, cfg.lr_min)
            loss, logits, grads = loss_and_grads(model, x[idx], y[idx], quantized)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {t}")
            opt.step(model, grads, lr)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
            t += 1
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / len(x),
            "train_acc": correct / len(x),
            "val_acc": evaluate(model, x_val, y_val, quantized) if x_val is not None else float("nan"),
        }
        history.append(row)
    if quantized:
        model.refresh_scales()
    return history
