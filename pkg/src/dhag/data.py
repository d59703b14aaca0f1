"""Dataset loading, normalisation, evaluation splits and synthetic data."""

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "DHAG_DATA_DIR"
PROTOCOLS = ("goad_style", "semisup_60_40", "fraction")


@dataclass
class NormStats:
    mode: str
    shift: np.ndarray
    scale: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: Optional[list] = None
    norm_stats: Optional[NormStats] = None
    indices: Optional[np.ndarray] = None  # row positions in the source dataset
    categories: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must have one entry per row")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 (normal) or 1 (anomaly)")
        if self.indices is None:
            self.indices = np.arange(self.features.shape[0])

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            features=self.features[rows],
            labels=self.labels[rows],
            indices=self.indices[rows],
        )


def _parse_float(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {column!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {column!r}: non-finite value {text!r}")
    return value


def _label_of(raw, anomaly_values, row):
    if anomaly_values is None:
        value = _parse_float(raw, row, "label")
        if value not in (0.0, 1.0):
            raise DataError(f"row {row}: label {raw!r} is not 0/1; declare anomaly_values")
        return int(value)
    return int(raw.strip() in anomaly_values)


def load_csv(
    path,
    label_column=None,
    delimiter=",",
    categorical=(),
    anomaly_values=None,
    categories=None,
    drop_columns=(),
):
    """Read a headered CSV into a :class:`Dataset`.

    ``anomaly_values`` lists raw label strings that mean "anomaly"; the
    special value ``"minority"`` picks the least frequent label. Without it
    the label column must already be 0/1. Categorical columns are one-hot
    expanded using ``categories`` when given (values unseen there become an
    all-zero block) or the sorted values found in this file otherwise.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh, delimiter=delimiter))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} is empty; a header row is required")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"row {i}: expected {len(header)} cells, found {len(r)}")

    categorical = list(categorical)
    missing = [c for c in [label_column, *categorical, *drop_columns] if c and c not in header]
    if missing:
        raise DataError(f"{path}: unknown column(s) {missing}")
    col = {name: j for j, name in enumerate(header)}

    if anomaly_values == "minority":
        raw = [r[col[label_column]].strip() for r in body]
        values, counts = np.unique(raw, return_counts=True)
        anomaly_values = {str(values[np.argmin(counts)])}
    elif anomaly_values is not None:
        anomaly_values = {str(v).strip() for v in anomaly_values}

    if categories is None:
        categories = {c: sorted({r[col[c]].strip() for r in body}) for c in categorical}
    skip = {label_column, *categorical, *drop_columns}
    numeric = [h for h in header if h not in skip]

    names = list(numeric)
    for c in categorical:
        names += [f"{c}={v}" for v in categories[c]]

    features = np.zeros((len(body), len(names)))
    labels = np.zeros(len(body), dtype=np.int64)
    unknown = 0
    for i, r in enumerate(body):
        line = i + 2
        for j, name in enumerate(numeric):
            features[i, j] = _parse_float(r[col[name]].strip(), line, name)
        offset = len(numeric)
        for c in categorical:
            levels = categories[c]
            value = r[col[c]].strip()
            if value in levels:
                features[i, offset + levels.index(value)] = 1.0
            else:
                unknown += 1
            offset += len(levels)
        if label_column:
            labels[i] = _label_of(r[col[label_column]], anomaly_values, line)
    if unknown:
        logger.warning("%s: %d unseen categorical value(s) mapped to all-zero blocks", path, unknown)
    return Dataset(features, labels, names, categories=categories)


@dataclass
class Manifest:
    """Where a dataset lives and how to read it."""

    path: str
    label_column: Optional[str] = None
    anomaly_values: Optional[list] = None
    categorical: list = field(default_factory=list)
    drop_columns: list = field(default_factory=list)
    delimiter: str = ","
    sha256: Optional[str] = None
    name: Optional[str] = None
    description: Optional[str] = None
    base_dir: Optional[str] = None

    def resolve_path(self):
        p = Path(os.path.expandvars(os.path.expanduser(self.path)))
        if p.is_absolute():
            return p
        candidates = []
        if self.base_dir:
            candidates.append(Path(self.base_dir) / p)
        if os.environ.get(DATA_DIR_ENV):
            candidates.append(Path(os.environ[DATA_DIR_ENV]) / p)
        candidates.append(p)
        for c in candidates:
            if c.exists():
                return c
        return candidates[0]

    def to_dict(self):
        out = {
            "path": self.path,
            "label_column": self.label_column,
            "anomaly_values": self.anomaly_values,
            "categorical": list(self.categorical),
            "drop_columns": list(self.drop_columns),
            "delimiter": self.delimiter,
            "sha256": self.sha256,
        }
        if self.name:
            out["name"] = self.name
        if self.description:
            out["description"] = self.description
        return out


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    known = set(Manifest.__dataclass_fields__) - {"base_dir"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"manifest {path}: unknown field(s) {sorted(extra)}")
    if "path" not in raw:
        raise ConfigError(f"manifest {path}: missing field 'path'")
    return Manifest(**raw, base_dir=str(path.parent.resolve()))


def write_manifest(path, manifest, with_checksum=True):
    if with_checksum:
        manifest.sha256 = file_sha256(manifest.resolve_path())
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def load_manifest_dataset(manifest, categories=None):
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    path = manifest.resolve_path()
    if not path.exists():
        raise DataError(
            f"data file {manifest.path!r} not found (looked next to the manifest and in ${DATA_DIR_ENV})"
        )
    if manifest.sha256 and file_sha256(path) != manifest.sha256:
        raise DataError(f"{path}: sha256 does not match the manifest")
    return load_csv(
        path,
        manifest.label_column,
        manifest.delimiter,
        manifest.categorical,
        manifest.anomaly_values,
        categories,
        manifest.drop_columns,
    )


def fit_norm_stats(x, mode="zscore"):
    x = np.asarray(x, dtype=np.float64)
    if mode == "zscore":
        shift = x.mean(axis=0)
        spread = x.std(axis=0)
    elif mode == "minmax":
        shift = x.min(axis=0)
        spread = x.max(axis=0) - shift
    else:
        raise ConfigError(f"unknown normalisation mode {mode!r}")
    # degenerate columns are only shifted
    scale = np.where(spread > 0, spread, 1.0)
    return NormStats(mode, shift, scale)


def normalize(train, others=(), mode="zscore"):
    """Fit statistics on ``train`` and apply the same affine map to every dataset."""
    stats = fit_norm_stats(train.features, mode)

    def apply(ds):
        return replace(ds, features=stats.apply(ds.features), norm_stats=stats)

    return apply(train), [apply(o) for o in others]


@dataclass
class SplitSpec:
    protocol: str = "goad_style"
    train_fraction: float = 0.5
    gamma: float = 0.0
    seed: int = 0

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"split.protocol must be one of {PROTOCOLS}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("split.train_fraction must lie in (0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("split.gamma must lie in [0, 1)")
        return self


class Split(NamedTuple):
    train: Dataset  # normal rows only
    labeled: Dataset  # known anomalies for the semi-supervised loss
    test: Dataset
    unused: np.ndarray  # training-side anomalies that were not labelled


def round_half_up(x):
    return int(math.floor(x + 0.5))


def n_labeled_anomalies(gamma, n_train):
    """Count N_s with gamma = N_s / (N_train + N_s), rounded, at least 1 when gamma > 0."""
    if gamma <= 0:
        return 0
    return max(1, round_half_up(gamma * n_train / (1.0 - gamma)))


def split(dataset, spec, rng=None):
    """Partition ``dataset`` into training normals, labelled anomalies and a test set.

    * ``goad_style``: half of the normals train; the test set gets the other
      normals and every anomaly that was not drawn as labelled.
    * ``fraction``: as above with ``train_fraction`` of the normals.
    * ``semisup_60_40``: each class is split 60/40 independently, so both
      sides keep the overall anomaly rate; labelled anomalies come from the
      training side and the rest of that side is returned as ``unused``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    labels = dataset.labels
    normals = np.flatnonzero(labels == 0)
    anomalies = np.flatnonzero(labels == 1)

    if spec.protocol == "semisup_60_40":
        normals = rng.permutation(normals)
        anomalies = rng.permutation(anomalies)
        n_tr = round_half_up(0.6 * len(normals))
        a_tr = round_half_up(0.6 * len(anomalies))
        train_idx, test_norm = normals[:n_tr], normals[n_tr:]
        pool, test_anom = anomalies[:a_tr], anomalies[a_tr:]
    else:
        frac = 0.5 if spec.protocol == "goad_style" else spec.train_fraction
        normals = rng.permutation(normals)
        n_tr = int(len(normals) * frac)
        train_idx, test_norm = normals[:n_tr], normals[n_tr:]
        pool, test_anom = rng.permutation(anomalies), np.array([], dtype=np.int64)

    n_s = n_labeled_anomalies(spec.gamma, len(train_idx))
    if n_s and len(pool) == 0:
        raise ConfigError("gamma > 0 but the dataset has no anomalies to label")
    if n_s > len(pool):
        logger.warning("only %d anomalies available for %d requested labels", len(pool), n_s)
        n_s = len(pool)
    labeled_idx = pool[:n_s]
    if spec.protocol == "semisup_60_40":
        unused = np.sort(pool[n_s:])
    else:
        test_anom = pool[n_s:]
        unused = np.array([], dtype=np.int64)

    test_idx = np.sort(np.concatenate([test_norm, test_anom]))
    return Split(
        dataset.subset(np.sort(train_idx)),
        dataset.subset(np.sort(labeled_idx)),
        dataset.subset(test_idx),
        dataset.indices[unused],
    )


def synthetic_two_gaussian(n_normal, n_anomaly, d, separation, rng=0):
    """Normals from N(0, I); anomalies from N(separation * u, I) for a random unit u."""
    if separation <= 0:
        raise ConfigError("separation must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    x_norm = rng.standard_normal((n_normal, d))
    x_anom = rng.standard_normal((n_anomaly, d)) + separation * u
    features = np.vstack([x_norm, x_anom])
    labels = np.concatenate([np.zeros(n_normal, dtype=np.int64), np.ones(n_anomaly, dtype=np.int64)])
    return Dataset(features, labels, [f"x{i}" for i in range(d)])
