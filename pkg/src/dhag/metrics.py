"""Detection metrics, multi-seed aggregation and latent export."""

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from . import autograd as ag
from .core import assign_pseudo_labels, generate_perturbations
from .exceptions import AggregateError, ConfigError, DataError, MetricError

METRIC_FIELDS = ("f1", "precision", "recall", "auc")


@dataclass
class MetricReport:
    f1: float
    precision: float
    recall: float
    auc: Optional[float] = None
    threshold: Optional[float] = None
    ratio: Optional[float] = None
    n_flagged: Optional[int] = None
    seed: Optional[int] = None

    def as_dict(self):
        return dataclasses.asdict(self)


def _check_binary(labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be a 1-D array of 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("metric undefined: labels contain a single class")
    return labels.astype(np.int64)


def n_flagged_for(ratio, n):
    # ratio * n can land a hair above an integer (e.g. 0.07 * 100); don't round that up
    return min(n, max(0, math.ceil(ratio * n - 1e-9)))


def top_k_mask(scores, k):
    """Flag the ``k`` highest scores; among equal scores the higher index wins."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), scores))
    mask = np.zeros(scores.size, dtype=bool)
    if k:
        mask[order[-k:]] = True
    return mask


def f1_at_contamination(scores, labels, ratio=None):
    """F1 of the anomaly class when the top ``ceil(ratio * n)`` scores are flagged.

    ``ratio`` defaults to the true anomaly fraction of ``labels``.
    """
    labels = _check_binary(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n = labels.size
    if ratio is None:
        ratio = labels.sum() / n
        k = int(labels.sum())
    else:
        if not 0.0 < ratio < 1.0:
            raise ConfigError("ratio must lie in (0, 1)")
        k = n_flagged_for(ratio, n)
    pred = top_k_mask(scores, k)
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    threshold = float(scores[pred].min()) if k else None
    return MetricReport(f1, precision, recall, threshold=threshold, ratio=float(ratio), n_flagged=k)


def auc(scores, labels):
    """P(anomaly score > normal score) + 0.5 P(tie), via average ranks."""
    labels = _check_binary(labels)
    scores = np.asarray(scores, dtype=np.float64)
    ranks = rankdata(scores, method="average")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(scores, labels, ratio=None, seed=None):
    report = f1_at_contamination(scores, labels, ratio)
    report.auc = auc(scores, labels)
    report.seed = seed
    return report


@dataclass
class AggregateReport:
    per_seed: list
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "per_seed": [r.as_dict() for r in self.per_seed],
            "mean": self.mean,
            "std": self.std,
        }


def aggregate(reports):
    out = AggregateReport(list(reports))
    for name in METRIC_FIELDS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if len(values) >= 2:
            out.mean[name] = float(np.mean(values))
            out.std[name] = float(np.std(values, ddof=1))
    return out


def multi_seed(run, seeds):
    """Call ``run(seed) -> MetricReport`` for each seed and aggregate (sample std)."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("multi_seed needs at least two seeds")
    reports = []
    for seed in seeds:
        try:
            report = run(seed)
        except Exception as exc:
            raise AggregateError(seed, exc) from exc
        report.seed = seed
        reports.append(report)
    return aggregate(reports)


def format_table(rows, columns):
    """Aligned plain-text table from a list of dicts."""

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def dumps_report(report):
    return json.dumps(report.as_dict() if hasattr(report, "as_dict") else report, sort_keys=True)


LATENT_ROLES = ("train-normal", "test-normal", "test-anomaly", "perturbed-normal", "perturbed-anomaly")


def export_latents(model, out_path, groups, perturb_source=None, n_augment=0, rng=None, eps_path=None):
    """Write encoder outputs to CSV for offline projection.

    ``groups`` is a list of ``(role, x)`` pairs. When ``perturb_source`` is
    given, each of its rows is also written once per perturbator, perturbed
    and tagged ``perturbed-normal`` or ``perturbed-anomaly`` by its
    pseudo-label; the perturbations themselves go to ``eps_path`` if set.
    Returns the number of data rows written.
    """
    for role, _ in groups:
        if role not in LATENT_ROLES:
            raise ConfigError(f"unknown latent role {role!r}")
    rows = []
    eps_rows = []
    with ag.no_grad():
        for role, x in groups:
            z = model.encode(ag.Tensor(x)).data
            rows += [(role, i, -1, z[i]) for i in range(z.shape[0])]
        if perturb_source is not None:
            if rng is None:
                raise ConfigError("a seeded rng is required to export perturbed latents")
            x = ag.Tensor(perturb_source)
            eps = generate_perturbations(model, x, rng)
            labels = assign_pseudo_labels(eps, min(n_augment, x.shape[0]))
            z = model.encode(x).data
            for ell in range(eps.shape[0]):
                e = eps.data[ell]
                if model.perturb_mode == "latent":
                    zt = z + e
                else:
                    zt = model.encode(ag.Tensor(x.data + e)).data
                for i in range(zt.shape[0]):
                    role = "perturbed-normal" if labels[ell, i] == 0 else "perturbed-anomaly"
                    rows.append((role, i, ell, zt[i]))
                    eps_rows.append((i, ell, e[i]))

    k = model.latent_dim
    try:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["role", "source_row", "perturbator", *[f"z{j}" for j in range(k)]])
            for role, i, ell, z in rows:
                w.writerow([role, i, ell, *map(repr, z.tolist())])
        if eps_path is not None:
            with open(eps_path, "w", newline="") as fh:
                w = csv.writer(fh)
                dim = eps_rows[0][2].size if eps_rows else 0
                w.writerow(["source_row", "perturbator", *[f"e{j}" for j in range(dim)]])
                for i, ell, e in eps_rows:
                    w.writerow([i, ell, *map(repr, e.tolist())])
    except OSError as exc:
        raise DataError(f"cannot write latent export: {exc}") from exc
    return len(rows)
