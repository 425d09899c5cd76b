"""Datasets, model files, and atomic output writing.

Model file: a JSON manifest plus a sidecar blob of little-endian float32
tensors in row-major order. The manifest records each tensor's byte offset
and shape, every layer's quantization scheme, and a SHA-256 of the blob.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import Conv2d, Dense, Flatten, Model, Pact, ReLU
from .posit import ScaleVariant
from .quantize import FixP4, FixPParams, Posit4

FORMAT = "mixcomp-model"
FORMAT_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Unreadable, malformed, or inconsistent input files."""


# ---------------------------------------------------------------- atomic writes


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def csv_text(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in columns})
    return buf.getvalue()


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # synthetic | csv | idx
    path: str | None = None
    labels_path: str | None = None
    test_fraction: float = 0.2
    seed: int = 0
    n_classes: int = 10
    dim: int = 64
    n_samples: int = 6000
    center_scale: float = 0.3
    noise: float = 1.0

    def __post_init__(self):
        if self.source not in ("synthetic", "csv", "idx"):
            raise DataError(f"unknown dataset source {self.source!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise DataError("test_fraction must lie strictly between 0 and 1")


def make_blobs(n_classes=10, dim=64, n_samples=6000, center_scale=0.3, noise=1.0, seed=0):
    """Overlapping isotropic Gaussian clusters, one per class."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(n_classes, dim))
    y = rng.integers(0, n_classes, size=n_samples)
    x = centers[y] + rng.normal(0.0, noise, size=(n_samples, dim))
    return x, y


def load_csv(path):
    """Numeric feature columns plus an integer ``label`` column."""
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or "label" not in reader.fieldnames:
                raise DataError(f"{path}: CSV needs a header row with a 'label' column")
            cols = [c for c in reader.fieldnames if c != "label"]
            xs, ys = [], []
            for row in reader:
                xs.append([float(row[c]) for c in cols])
                ys.append(int(row["label"]))
    except (OSError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"cannot read dataset {path}: {e}") from e
    return np.array(xs, dtype=np.float64).reshape(len(xs), len(cols)), np.array(ys, dtype=np.int64)


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped); big-endian header and dims."""
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read IDX file {path}: {e}") from e
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise DataError(f"{path}: bad IDX magic {magic:#010x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head != count:
        raise DataError(f"{path}: expected {count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def write_idx(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    data = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    atomic_write_bytes(path, data)


def split_and_normalize(x, y, test_fraction, seed, n_classes) -> Dataset:
    if len(x) != len(y) or len(x) == 0:
        raise DataError("features and labels are empty or differ in length")
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes})")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_test = max(1, int(round(len(x) * test_fraction)))
    te, tr = order[:n_test], order[n_test:]
    lo = x[tr].min(axis=0)
    span = x[tr].max(axis=0) - lo
    span[span == 0] = 1.0
    norm = lambda a: (a - lo) / span
    return Dataset(norm(x[tr]), y[tr], norm(x[te]), y[te], n_classes)


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Load and split; features are min-max scaled to [0, 1] with train statistics."""
    if spec.source == "synthetic":
        x, y = make_blobs(spec.n_classes, spec.dim, spec.n_samples, spec.center_scale, spec.noise, spec.seed)
        return split_and_normalize(x, y, spec.test_fraction, spec.seed, spec.n_classes)
    if spec.path is None:
        raise DataError(f"{spec.source} dataset needs a path")
    if spec.source == "csv":
        x, y = load_csv(spec.path)
    else:
        if spec.labels_path is None:
            raise DataError("IDX dataset needs labels_path")
        images = read_idx(spec.path).astype(np.float64)
        y = read_idx(spec.labels_path).astype(np.int64)
        x = images.reshape(len(images), -1)
    n_classes = int(y.max()) + 1 if len(y) else spec.n_classes
    return split_and_normalize(x, y, spec.test_fraction, spec.seed, n_classes)


def dataset_spec_from_arg(arg: str, seed: int = 0) -> DatasetSpec:
    """``synthetic``, a ``.csv`` path, an IDX pair ``images,labels``, or a JSON spec file."""
    if arg == "synthetic":
        return DatasetSpec(seed=seed)
    if arg.endswith(".json"):
        try:
            with open(arg) as f:
                d = json.load(f)
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read dataset spec {arg}: {e}") from e
        d.setdefault("seed", seed)
        try:
            return DatasetSpec(**d)
        except TypeError as e:
            raise DataError(f"bad dataset spec {arg}: {e}") from e
    if "," in arg:
        images, labels = arg.split(",", 1)
        return DatasetSpec("idx", images, labels, seed=seed)
    if not os.path.exists(arg):
        raise DataError(f"dataset file {arg} not found")
    return DatasetSpec("csv", arg, seed=seed)


def dataset_csv_text(x, y) -> str:
    cols = [f"f{i}" for i in range(x.shape[1])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols + ["label"])
    for row, label in zip(x, y):
        w.writerow([repr(float(v)) for v in row] + [int(label)])
    return buf.getvalue()


# ---------------------------------------------------------------- model files


def _scheme_to_json(scheme, fixp_scale):
    if scheme is None:
        return None
    if isinstance(scheme, Posit4):
        return {"kind": "posit4", "variant": scheme.variant.label}
    p = scheme.params
    return {
        "kind": "fixp4",
        "n": p.n,
        "int_bits": p.int_bits,
        "frac_bits": p.frac_bits,
        "low": p.low,
        "high": p.high,
        "scale": fixp_scale,
    }


def _scheme_from_json(d):
    if d is None:
        return None, None
    if d["kind"] == "posit4":
        return Posit4(ScaleVariant.from_label(d["variant"])), None
    if d["kind"] == "fixp4":
        p = FixPParams(d["n"], d["int_bits"], d["frac_bits"], d["low"], d["high"])
        return FixP4(p), d.get("scale")
    raise DataError(f"unknown scheme kind {d['kind']!r}")


def model_to_bytes(model: Model, blob_name: str) -> tuple[str, bytes]:
    """Serialize to ``(manifest_text, blob_bytes)``."""
    blob = bytearray()
    layers = []
    for l in model.layers:
        entry = {"name": l.name, "kind": l.kind, "tensors": {}}
        for k in sorted(l.params):
            arr = np.asarray(l.params[k], dtype="<f4")
            entry["tensors"][k] = {"offset": len(blob), "shape": list(arr.shape), "nbytes": arr.nbytes}
            blob += arr.tobytes()
        if l.quantizable:
            entry["scheme"] = _scheme_to_json(l.scheme, l.fixp_scale)
        if isinstance(l, Conv2d):
            entry["padding"] = l.padding
        if isinstance(l, Pact):
            entry["n_bits"] = l.n_bits
        layers.append(entry)
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "n_classes": model.n_classes,
        "layers": layers,
        "blob": blob_name,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        "meta": model.meta,
    }
    return dumps_json(manifest), bytes(blob)


def blob_path_for(path) -> Path:
    return Path(path).with_suffix(".bin")


def save_model(model: Model, path):
    path = Path(path)
    blob_path = blob_path_for(path)
    text, blob = model_to_bytes(model, blob_path.name)
    atomic_write_bytes(blob_path, blob)
    atomic_write_text(path, text)


_KINDS = {"dense": Dense, "conv2d": Conv2d, "relu": ReLU, "pact": Pact, "flatten": Flatten}


def load_model(path) -> Model:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read model manifest {path}: {e}") from e
    if manifest.get("format") != FORMAT or manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: not a {FORMAT} v{FORMAT_VERSION} manifest")
    blob_path = path.parent / manifest["blob"]
    try:
        blob = blob_path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read model blob {blob_path}: {e}") from e
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise DataError(f"{blob_path}: checksum mismatch")

    layers = []
    for e in manifest["layers"]:
        tensors = {}
        for k, t in e["tensors"].items():
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            if t["offset"] < 0 or t["offset"] + 4 * count > len(blob) or t["nbytes"] != 4 * count:
                raise DataError(f"{path}: tensor {e['name']}.{k} lies outside the blob")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=t["offset"])
            tensors[k] = arr.reshape(t["shape"]).astype(np.float64)
        cls = _KINDS.get(e["kind"])
        if cls is None:
            raise DataError(f"unknown layer kind {e['kind']!r}")
        if cls in (Dense, Conv2d):
            scheme, scale = _scheme_from_json(e.get("scheme"))
            kw = {"padding": e["padding"]} if cls is Conv2d else {}
            layer = cls(e["name"], tensors["W"], tensors["b"], scheme=scheme, **kw)
            layer.fixp_scale = scale
        elif cls is Pact:
            layer = Pact(e["name"], 1.0, e.get("n_bits"))
            layer.params["alpha"] = tensors["alpha"]
        else:
            layer = cls(e["name"])
        layers.append(layer)
    return Model(layers, tuple(manifest["input_shape"]), manifest["n_classes"], manifest.get("meta", {}))
