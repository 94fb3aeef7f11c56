"""Synthetic source/target datasets with parameterized corruption families.

The source task is a K-class Gaussian mixture whose class means sit on a
randomly rotated regular simplex with fixed pairwise distance. Corruptions
transform inputs only (labels never change) with strictly monotone severity
ladders; a "natural" shift variant regenerates the same mixture with mildly
perturbed means and inflated covariance. CSV is the only interchange format.
"""

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ShapeError
from .seeding import derive_rng

CORRUPTION_KINDS = ("gaussian_noise", "uniform_noise", "feature_scale",
                    "mean_shift", "rotation", "salt_mask")

# severity ladders, index 0 = severity 1
_GAUSSIAN_SIGMA = (0.1, 0.25, 0.5, 0.75, 1.0)       # x class-mean spread
_UNIFORM_HALF_WIDTH = (0.2, 0.4, 0.8, 1.2, 1.6)
_SCALE_FACTOR = (0.9, 0.75, 0.5, 0.35, 0.2)
_SHIFT_MAGNITUDE = (0.25, 0.5, 1.0, 1.5, 2.0)
_ROTATION_DEGREES = (5.0, 10.0, 20.0, 35.0, 50.0)
_SALT_FRACTION = (0.05, 0.10, 0.20, 0.30, 0.40)


@dataclass
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")
        self.severity = int(self.severity)


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError("dataset", self.inputs.shape, self.labels.shape)

    def __len__(self):
        return self.inputs.shape[0]


def _class_means(num_classes, input_dim, seed, mean_distance):
    """Regular simplex of class means (pairwise distance fixed), randomly rotated."""
    if num_classes < 2 or input_dim < num_classes:
        raise ShapeError("generate_source: need 2 <= K <= input_dim",
                         (num_classes,), (input_dim,))
    rng = derive_rng(seed, "source-means")
    simplex = np.eye(num_classes) - 1.0 / num_classes
    simplex *= mean_distance / np.sqrt(2.0)
    means = np.zeros((num_classes, input_dim))
    means[:, :num_classes] = simplex
    gauss = rng.standard_normal((input_dim, input_dim))
    q, r = np.linalg.qr(gauss)
    q *= np.sign(np.diag(r))
    return means @ q.T


def _balanced_labels(n, num_classes, rng):
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    rng.shuffle(labels)
    return labels


def generate_source(num_classes, input_dim, n, seed, mean_distance=4.0, split="train"):
    """Balanced K-class unit-covariance Gaussian mixture, deterministic per seed.

    ``split`` names an independent draw stream so train/test/benchmark splits
    share the same class means but never the same samples.
    """
    if n < num_classes:
        raise ShapeError("generate_source: need n >= K", (n,), (num_classes,))
    means = _class_means(num_classes, input_dim, seed, mean_distance)
    rng = derive_rng(seed, "source-draw", split)
    labels = _balanced_labels(n, num_classes, rng)
    inputs = means[labels] + rng.standard_normal((n, input_dim))
    meta = {"generator": "gaussian_mixture", "seed": seed, "split": split,
            "num_classes": num_classes, "input_dim": input_dim,
            "mean_distance": float(mean_distance)}
    return LabeledDataset(inputs, labels, meta)


def class_mean_spread(ds):
    """Mean pairwise distance between empirical class means."""
    classes = np.unique(ds.labels)
    if classes.size < 2:
        raise ValueError("class-mean spread needs at least two classes present")
    means = np.stack([ds.inputs[ds.labels == c].mean(axis=0) for c in classes])
    dists = [np.linalg.norm(means[i] - means[j])
             for i in range(len(classes)) for j in range(i + 1, len(classes))]
    return float(np.mean(dists))


def _random_unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def apply_corruption(ds, spec):
    """Corrupted copy of ``ds``: inputs transformed, labels bitwise unchanged."""
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(**spec)
    rng = derive_rng(ds.meta.get("seed"), "corrupt", spec.kind, spec.severity,
                     ds.meta.get("split"))
    level = spec.severity - 1
    x = ds.inputs.copy()
    n, d = x.shape

    if spec.kind == "gaussian_noise":
        sigma = _GAUSSIAN_SIGMA[level] * class_mean_spread(ds)
        x += sigma * rng.standard_normal((n, d))
    elif spec.kind == "uniform_noise":
        a = _UNIFORM_HALF_WIDTH[level]
        x += rng.uniform(-a, a, size=(n, d))
    elif spec.kind == "feature_scale":
        x *= _SCALE_FACTOR[level]
    elif spec.kind == "mean_shift":
        x += _SHIFT_MAGNITUDE[level] * _random_unit(rng, d)
    elif spec.kind == "rotation":
        theta = np.deg2rad(_ROTATION_DEGREES[level])
        u = _random_unit(rng, d)
        v = rng.standard_normal(d)
        v -= (v @ u) * u
        v /= np.linalg.norm(v)
        a = x @ u
        b = x @ v
        x += np.outer((np.cos(theta) - 1.0) * a - np.sin(theta) * b, u)
        x += np.outer(np.sin(theta) * a + (np.cos(theta) - 1.0) * b, v)
    elif spec.kind == "salt_mask":
        count = int(round(_SALT_FRACTION[level] * d))
        if count > 0:
            order = np.argsort(rng.random((n, d)), axis=1)[:, :count]
            np.put_along_axis(x, order, 0.0, axis=1)

    meta = dict(ds.meta)
    meta["corruption"] = {"kind": spec.kind, "severity": spec.severity}
    return LabeledDataset(x, ds.labels.copy(), meta)


def natural_shift(source_ds, seed, n=2000):
    """Mild semantic-flavored shift: perturbed class means, inflated covariance.

    Class means move by 10% of the mean spread in seeded random directions and
    the covariance scales by 1.2x relative to the source family of
    ``source_ds`` (recovered from its metadata).
    """
    meta = source_ds.meta
    required = ("seed", "num_classes", "input_dim", "mean_distance")
    if any(k not in meta for k in required):
        raise ValueError("natural_shift needs a generated source dataset "
                         "(metadata incomplete)")
    k, d = meta["num_classes"], meta["input_dim"]
    spread = meta["mean_distance"]
    means = _class_means(k, d, meta["seed"], spread)
    rng = derive_rng(seed, "natural-shift")
    for i in range(k):
        means[i] += 0.1 * spread * _random_unit(rng, d)
    labels = _balanced_labels(n, k, rng)
    inputs = means[labels] + np.sqrt(1.2) * rng.standard_normal((n, d))
    new_meta = {"generator": "natural_shift", "seed": seed, "source_seed": meta["seed"],
                "num_classes": k, "input_dim": d, "mean_distance": spread}
    return LabeledDataset(inputs, labels, new_meta)


# -- CSV interchange ---------------------------------------------------------


def save_csv(ds, path):
    """Write `label,f0,...,f{d-1}` rows with 17 significant digits, atomically."""
    d = ds.inputs.shape[1]
    header = "label," + ",".join(f"f{i}" for i in range(d))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(header + "\n")
            for label, row in zip(ds.labels, ds.inputs):
                fh.write(str(int(label)) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_csv(path):
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(path, 1, "empty file")
    header = lines[0].split(",")
    if header[0] != "label" or len(header) < 2:
        raise DataFormatError(path, 1, f"bad header {lines[0]!r}")
    width = len(header)
    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise DataFormatError(path, lineno, "blank row")
        parts = line.split(",")
        if len(parts) != width:
            raise DataFormatError(path, lineno,
                                  f"expected {width} columns, got {len(parts)}")
        try:
            label = int(parts[0])
        except ValueError:
            raise DataFormatError(path, lineno,
                                  f"non-integer label {parts[0]!r}") from None
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise DataFormatError(path, lineno, "malformed feature value") from None
        labels.append(label)
    if not rows:
        raise DataFormatError(path, 2, "no data rows")
    meta = {"generator": "csv", "path": str(path), "seed": None}
    return LabeledDataset(np.asarray(rows), np.asarray(labels), meta)


def target_filename(family, kind, severity, seed):
    """Repository naming convention for corrupted target CSVs."""
    return f"{family}_{kind}_s{severity}_{seed}.csv"
