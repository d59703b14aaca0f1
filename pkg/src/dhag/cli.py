"""Command-line entry point: ``dhag {train,eval,score,sweep,latents}``.

Exit codes: 0 success, 2 configuration/user error, 3 numerical failure.
"""

import argparse
import concurrent.futures
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, core, data, metrics, pipeline
from .exceptions import DhagError, NonFiniteError

logger = logging.getLogger("dhag")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3

GRID_ALIASES = {
    "lambda1": "train.lambda1",
    "lambda2": "train.lambda2",
    "K": "train.n_augment",
    "n_augment": "train.n_augment",
    "L": "train.n_perturbators",
    "n_perturbators": "train.n_perturbators",
    "epochs": "train.epochs",
    "gamma": "train.gamma",
    "mode": "train.perturb_mode",
}

CHECKPOINT_NAME = "model.ckpt"
LOSSES_NAME = "losses.csv"
CONFIG_NAME = "resolved_config.json"
METRICS_NAME = "metrics.json"


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _apply_flags(cfg, args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
        overrides["split.seed"] = args.seed
    if getattr(args, "gamma", None) is not None:
        overrides["train.gamma"] = args.gamma
    if getattr(args, "mode", None) is not None:
        overrides["train.perturb_mode"] = args.mode
    if getattr(args, "adversarial_perturbators", False):
        overrides["train.adversarial_perturbators"] = True
    if overrides:
        cfg = pipeline.with_overrides(cfg, overrides)
    if getattr(args, "ratio", None) is not None:
        cfg.metrics["ratio"] = args.ratio
    return cfg


def _schema(raw):
    """Column layout the model was trained on, checked again by ``score``."""
    categorical = list(raw.categories)
    n_cat = sum(len(v) for v in raw.categories.values())
    numeric = raw.feature_names[: len(raw.feature_names) - n_cat] if raw.feature_names else None
    return {"numeric_columns": numeric, "categories": raw.categories, "categorical": categorical}


def train_and_save(cfg, out_dir):
    """Run the pipeline and write checkpoint, loss history, resolved config and metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = pipeline.run(cfg)
    stats = result.prepared.stats
    meta = {
        "config": cfg.to_dict(),
        "schema": _schema(result.prepared.raw),
        "n_labeled_anomalies": result.n_labeled,
    }
    checkpoint.save_checkpoint(
        out_dir / CHECKPOINT_NAME,
        result.model,
        {"norm.shift": stats.shift, "norm.scale": stats.scale},
        meta,
    )
    with open(out_dir / LOSSES_NAME, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l_ce", "l_norm", "l_div", "l_aug", "l_total"])
        for i, r in enumerate(result.history):
            w.writerow([i, repr(r.l_ce), repr(r.l_norm), repr(r.l_div), repr(r.l_aug), repr(r.l_total)])
    _write_json(out_dir / CONFIG_NAME, cfg.to_dict())
    _write_json(out_dir / METRICS_NAME, result.report.as_dict())
    return result


def cmd_train(args):
    cfg = _apply_flags(pipeline.load_config(args.config), args)
    out_dir = Path(args.out) if args.out else cfg.resolve(cfg.output_dir)
    result = train_and_save(cfg, out_dir)
    if cfg.train.gamma > 0:
        print(f"labelled anomalies: {result.n_labeled} (gamma={cfg.train.gamma:g})")
    print(metrics.format_table([result.report.as_dict()], ["f1", "precision", "recall", "auc", "n_flagged"]))
    print(f"artifacts written to {out_dir}")
    return EXIT_OK


def _load_model(path):
    model, arrays, meta = checkpoint.load_checkpoint(path)
    stats = data.NormStats("stored", arrays["norm.shift"], arrays["norm.scale"])
    return model, stats, meta


def _histogram(scores, bins=10):
    counts, edges = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def cmd_eval(args):
    model, stats, meta = _load_model(args.checkpoint)
    if args.config:
        cfg = pipeline.load_config(args.config)
        test = data.split(pipeline.load_dataset(cfg), cfg.split).test
        ratio = cfg.metrics["ratio"]
    else:
        schema = meta.get("schema", {})
        test = data.load_manifest_dataset(args.manifest, categories=schema.get("categories") or None)
        ratio = None
    if args.ratio is not None:
        ratio = args.ratio
    if test.n_features != model.n_features:
        raise data.DataError(f"dataset has {test.n_features} features, checkpoint expects {model.n_features}")
    features = stats.apply(test.features)
    scores = core.anomaly_score(model, features)
    report = metrics.evaluate(scores, test.labels, ratio, seed=meta.get("config", {}).get("train", {}).get("seed"))
    out = {"metrics": report.as_dict(), "score_histogram": _histogram(scores)}
    print(metrics.format_table([report.as_dict()], ["f1", "precision", "recall", "auc", "n_flagged"]))
    hist = out["score_histogram"]
    print("score histogram:", " ".join(str(c) for c in hist["counts"]))
    if args.out:
        _write_json(args.out, out)
    return EXIT_OK


def _read_score_input(path, meta):
    schema = meta.get("schema") or {}
    numeric = schema.get("numeric_columns")
    categorical = schema.get("categorical") or []
    with open(path, newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    if numeric is None:
        numeric = [h for h in header if h not in categorical]
    missing = [c for c in [*numeric, *categorical] if c not in header]
    if missing:
        raise data.DataError(f"input is missing column(s) {missing}")
    drop = [h for h in header if h not in numeric and h not in categorical]
    ds = data.load_csv(path, None, ",", categorical, None, schema.get("categories") or None, drop)
    n_num = len(ds.feature_names) - sum(len(v) for v in ds.categories.values())
    if ds.feature_names[:n_num] != list(numeric):
        raise data.DataError("input columns are not in the order the model was trained with")
    return ds


def cmd_score(args):
    model, stats, meta = _load_model(args.checkpoint)
    ds = _read_score_input(args.input, meta)
    if ds.n_features != model.n_features:
        raise data.DataError(f"input has {ds.n_features} features, model expects {model.n_features}")
    features = stats.apply(ds.features)
    scores = core.anomaly_score(model, features)
    labels = core.classify(scores, args.delta)
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", "score", "label"])
        for i, (s, y) in enumerate(zip(scores, labels)):
            w.writerow([i, repr(float(s)), int(y)])
    print(f"scored {len(scores)} rows -> {args.output}")
    return EXIT_OK


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    return text


def parse_grid(spec):
    """``"lambda1=1e-4,1e-2;L=3,5"`` (or a JSON object file) -> ordered list of override dicts."""
    path = Path(spec)
    if path.suffix == ".json" and path.exists():
        raw = json.loads(path.read_text())
        axes = {k: list(v) for k, v in raw.items()}
    else:
        axes = {}
        for part in filter(None, (p.strip() for p in spec.split(";"))):
            key, _, values = part.partition("=")
            axes[key.strip()] = [_parse_value(v.strip()) for v in values.split(",") if v.strip()]
    if not axes or any(not v for v in axes.values()):
        raise pipeline.ConfigError("grid is empty")
    keys = [GRID_ALIASES.get(k, k) for k in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes.values())]


def _sweep_point(cfg, overrides, seeds):
    point = pipeline.with_overrides(cfg, overrides)
    reports = [pipeline.run(pipeline.with_seed(point, s)).report for s in seeds]
    for r, s in zip(reports, seeds):
        r.seed = s
    return reports


def cmd_sweep(args):
    cfg = _apply_flags(pipeline.load_config(args.config), args)
    grid = parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(args.jobs) as pool:
            futures = [pool.submit(_sweep_point, cfg, o, seeds) for o in grid]
            results = [f.result() for f in futures]
    else:
        results = [_sweep_point(cfg, o, seeds) for o in grid]

    rows = []
    for overrides, reports in zip(grid, results):
        row = {k.split(".", 1)[1]: v for k, v in overrides.items()}
        if len(reports) > 1:
            agg = metrics.aggregate(reports)
            for name in metrics.METRIC_FIELDS:
                row[name] = agg.mean.get(name)
                row[f"{name}_std"] = agg.std.get(name)
        else:
            row.update({name: getattr(reports[0], name) for name in metrics.METRIC_FIELDS})
        rows.append(row)
    # stable sort keeps grid order among equal metrics
    rows.sort(key=lambda r: -(r.get(args.metric) or 0.0))
    keys = [k.split(".", 1)[1] for k in grid[0]]
    columns = keys + list(metrics.METRIC_FIELDS)
    if len(seeds) > 1:
        columns += [f"{m}_std" for m in metrics.METRIC_FIELDS]
    print(metrics.format_table(rows, columns))
    out_dir = Path(args.out) if args.out else cfg.resolve(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return EXIT_OK


def cmd_latents(args):
    cfg = pipeline.load_config(args.config)
    model, stats, _ = _load_model(args.checkpoint)
    parts = data.split(pipeline.load_dataset(cfg), cfg.split)
    train_x = stats.apply(parts.train.features)
    test = parts.test
    tx = stats.apply(test.features)
    groups = [
        ("train-normal", train_x),
        ("test-normal", tx[test.labels == 0]),
        ("test-anomaly", tx[test.labels == 1]),
    ]
    rng = np.random.default_rng(cfg.train.seed)
    n = metrics.export_latents(
        model,
        args.out,
        groups,
        perturb_source=train_x if args.perturbed else None,
        n_augment=cfg.train.n_augment,
        rng=rng,
        eps_path=args.eps_out,
    )
    print(f"wrote {n} latent rows -> {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dhag", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--ratio", type=float)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--mode", choices=core.PERTURB_MODES)
        sp.add_argument("--adversarial-perturbators", action="store_true")

    t = sub.add_parser("train", help="train a model and write its artifacts")
    run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="rebuild the test split of this run config")
    src.add_argument("--manifest", help="evaluate on every row of this dataset")
    e.add_argument("--ratio", type=float)
    e.add_argument("--out", help="write the metric report here (JSON)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="score rows of a CSV file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--delta", type=float, default=0.5)
    s.set_defaults(func=cmd_score)

    w = sub.add_parser("sweep", help="grid search over hyper-parameters")
    run_flags(w)
    w.add_argument("--grid", required=True, help='e.g. "lambda1=1e-4,1e-2;L=3,5" or a JSON file')
    w.add_argument("--seeds", help="comma-separated seeds per grid point")
    w.add_argument("--metric", default="f1", choices=metrics.METRIC_FIELDS)
    w.add_argument("--jobs", type=int, default=1)
    w.set_defaults(func=cmd_sweep)

    lat = sub.add_parser("latents", help="export latent representations to CSV")
    lat.add_argument("--checkpoint", required=True)
    lat.add_argument("--config", required=True)
    lat.add_argument("--out", required=True)
    lat.add_argument("--perturbed", action="store_true")
    lat.add_argument("--eps-out")
    lat.set_defaults(func=cmd_latents)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "delta", None) is not None and not 0 < args.delta < 1:
        parser.error("--delta must lie in (0, 1)")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DhagError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
