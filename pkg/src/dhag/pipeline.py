"""Run configuration and the data -> train -> evaluate pipeline used by the CLI."""

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core, data, metrics
from .core import ArchConfig, TrainConfig
from .data import SplitSpec
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    dataset: dict
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    architecture: ArchConfig = field(default_factory=ArchConfig)
    normalization: str = "zscore"
    output_dir: str = "runs/default"
    metrics: dict = field(default_factory=lambda: {"ratio": None, "delta": 0.5})
    base_dir: str = "."

    def to_dict(self):
        """Fully resolved form: every default is written out."""
        arch = dataclasses.asdict(self.architecture)
        for k in ("encoder_hidden", "discriminator_hidden", "perturbator_channels"):
            arch[k] = list(arch[k])
        return {
            "version": CONFIG_VERSION,
            "dataset": copy.deepcopy(self.dataset),
            "split": dataclasses.asdict(self.split),
            "train": dataclasses.asdict(self.train),
            "architecture": arch,
            "normalization": self.normalization,
            "output_dir": self.output_dir,
            "metrics": dict(self.metrics),
        }

    def resolve(self, relative):
        p = Path(relative)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {unknown}")
    values = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key}: expected true/false, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key}: expected an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key}: expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, tuple):
            if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
                raise ConfigError(f"{name}.{key}: expected a list of integers")
            value = tuple(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{name}.{key}: expected a string, got {value!r}")
        values[key] = value
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(raw, base_dir="."):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"version", "dataset", "split", "train", "architecture", "normalization", "output_dir", "metrics"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {unknown}")
    if raw.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {raw.get('version')!r}")
    ds = raw.get("dataset")
    if not isinstance(ds, dict) or len(set(ds) & {"manifest", "synthetic"}) != 1:
        raise ConfigError("dataset: give exactly one of 'manifest' (path) or 'synthetic' (object)")
    if "synthetic" in ds:
        syn = {"n_normal": 2000, "n_anomaly": 200, "d": 8, "separation": 6.0, "seed": 0}
        extra = set(ds["synthetic"]) - set(syn)
        if extra:
            raise ConfigError(f"dataset.synthetic: unknown field(s) {sorted(extra)}")
        syn.update(ds["synthetic"])
        ds = {"synthetic": syn}
    metrics_cfg = {"ratio": None, "delta": 0.5}
    metrics_cfg.update(raw.get("metrics") or {})
    if set(metrics_cfg) - {"ratio", "delta"}:
        raise ConfigError("metrics: only 'ratio' and 'delta' are supported")
    if metrics_cfg["ratio"] is not None and not 0 < metrics_cfg["ratio"] < 1:
        raise ConfigError("metrics.ratio: must lie in (0, 1)")
    if not 0 < metrics_cfg["delta"] < 1:
        raise ConfigError("metrics.delta: must lie in (0, 1)")
    # gamma lives in both sections; one given value fills the other
    split_raw = dict(raw.get("split") or {})
    train_raw = dict(raw.get("train") or {})
    if "gamma" in split_raw and "gamma" not in train_raw:
        train_raw["gamma"] = split_raw["gamma"]
    elif "gamma" in train_raw and "gamma" not in split_raw:
        split_raw["gamma"] = train_raw["gamma"]
    normalization = raw.get("normalization", "zscore")
    if normalization not in ("zscore", "minmax"):
        raise ConfigError("normalization: must be 'zscore' or 'minmax'")
    cfg = RunConfig(
        dataset=ds,
        split=_section(SplitSpec, split_raw, "split"),
        train=_section(TrainConfig, train_raw, "train"),
        architecture=_section(ArchConfig, raw.get("architecture"), "architecture"),
        normalization=normalization,
        output_dir=raw.get("output_dir", "runs/default"),
        metrics=metrics_cfg,
        base_dir=str(base_dir),
    )
    try:
        cfg.split.validate()
    except ConfigError as exc:
        raise ConfigError(f"split: {exc}") from exc
    try:
        cfg.train.validate()
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from exc
    if cfg.train.gamma != cfg.split.gamma:
        raise ConfigError("train.gamma and split.gamma must agree")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent.resolve())


def load_dataset(cfg):
    ds = cfg.dataset
    if "synthetic" in ds:
        s = ds["synthetic"]
        return data.synthetic_two_gaussian(s["n_normal"], s["n_anomaly"], s["d"], s["separation"], s["seed"])
    return data.load_manifest_dataset(cfg.resolve(ds["manifest"]))


@dataclass
class PreparedData:
    train: data.Dataset
    labeled: data.Dataset
    test: data.Dataset
    stats: data.NormStats
    raw: data.Dataset


def prepare_data(cfg, dataset=None):
    raw = load_dataset(cfg) if dataset is None else dataset
    parts = data.split(raw, cfg.split)
    train, (labeled, test) = data.normalize(parts.train, [parts.labeled, parts.test], cfg.normalization)
    return PreparedData(train, labeled, test, train.norm_stats, raw)


@dataclass
class RunResult:
    model: core.DhagModel
    history: list
    report: metrics.MetricReport
    scores: np.ndarray
    prepared: PreparedData
    n_labeled: int


def run(cfg, dataset=None, on_step=None):
    """Split, normalise, train and evaluate on the test split."""
    prep = prepare_data(cfg, dataset)
    n_s = len(prep.labeled)
    if cfg.train.gamma > 0:
        logger.info(
            "semi-supervised: %d labelled anomalies for gamma=%g and %d training normals",
            n_s,
            cfg.train.gamma,
            len(prep.train),
        )
    model = core.build_model(prep.train.n_features, cfg.train, cfg.architecture)
    result = core.fit(
        model,
        prep.train.features,
        cfg.train,
        x_anom=prep.labeled.features if n_s else None,
        on_step=on_step,
    )
    scores = core.anomaly_score(model, prep.test.features)
    report = metrics.evaluate(scores, prep.test.labels, cfg.metrics["ratio"], seed=cfg.train.seed)
    return RunResult(model, result.history, report, scores, prep, n_s)


def with_seed(cfg, seed):
    out = copy.deepcopy(cfg)
    out.train.seed = seed
    out.split.seed = seed
    return out


def with_overrides(cfg, overrides):
    """Copy of ``cfg`` with ``{"train.lambda1": 0.1, ...}`` style overrides applied."""
    raw = cfg.to_dict()
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if not name or section not in ("train", "split", "architecture"):
            raise ConfigError(f"cannot override {key!r}")
        raw[section][name] = value
        if name == "gamma":
            raw["train"]["gamma"] = raw["split"]["gamma"] = value
    return config_from_dict(raw, cfg.base_dir)
