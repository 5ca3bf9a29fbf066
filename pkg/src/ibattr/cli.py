"""ibattr command line: generate, train, attribute, evaluate, compare.

Every command takes ``--config`` (YAML or JSON), ``--seed`` and repeatable
``--set key.sub=value`` overrides; flags win over the file. Exit status is 0
only when every requested output was written.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, from_dict, load_config, parse_override
from .maps import AttributionMap, atomic_write, dumps_json
from .methods import METHOD_NAMES, attribute, check_method, derive_seed, feature_statistics
from .models import (
    ToyCnn,
    build_model,
    detector_labels,
    holdout_split,
    load_checkpoint,
    load_checkpoint_arrays,
    save_checkpoint,
    train_classifier,
    train_regressor,
)
from .report import compare_methods, plot_insertion_deletion
from .synthetic import cumulative_scores, generate_dataset, label_matrix, load_dataset, save_dataset, stack_images

STATS_KEY = "stats_images"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve_config(args, fallback: dict | None = None) -> RunConfig:
    overrides = dict(parse_override(text) for text in (args.set or []))
    if args.seed is not None:
        overrides["seed"] = args.seed
    for flag, key in (("layer", "attribution.layer"), ("threshold", "attribution.threshold")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if getattr(args, "layers", None):
        overrides["attribution.layers"] = args.layers.split(",")
    if getattr(args, "target_value", None) is not None:
        overrides["attribution.target_value"] = args.target_value
    if getattr(args, "methods", None):
        overrides["evaluation.methods"] = args.methods.split(",")
    if getattr(args, "metrics", None):
        overrides["evaluation.metrics"] = args.metrics.split(",")
    if args.config is None and fallback is not None:
        raw = dict(fallback)
        for dotted, value in overrides.items():
            node = raw
            *head, last = dotted.split(".")
            for part in head:
                node = node.setdefault(part, {})
            node[last] = value
        return from_dict(raw)
    return load_config(args.config, overrides)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with atomic_write(path, "w") as fh:
        fh.write(dumps_json(payload))


def _load_model(path) -> tuple[ToyCnn, dict, np.ndarray | None]:
    if not Path(path).exists():
        raise CliError(f"checkpoint {path} does not exist")
    model, extra = load_checkpoint(path)
    arrays = load_checkpoint_arrays(path)
    return model, extra, arrays.get(STATS_KEY)


def _read_images(source: Path) -> list[tuple[str, np.ndarray]]:
    if source.is_file():
        files = [source]
    elif (source / "images").is_dir():
        files = sorted((source / "images").glob("*.png"))
    elif source.is_dir():
        files = sorted(source.glob("*.png"))
    else:
        raise CliError(f"{source} is neither an image nor a directory")
    if not files:
        raise CliError(f"no .png images found under {source}")
    out = []
    for f in files:
        pixels = np.asarray(Image.open(f).convert("L"), dtype=np.float64) / 255.0
        out.append((f.stem, pixels))
    return out


def render_overlay(image: np.ndarray, values: np.ndarray, path: Path, alpha: float = 0.5, scale: int = 4) -> None:
    """Grayscale input blended with the viridis-mapped map, normalized per image for display only."""
    from matplotlib import colormaps

    lo, hi = float(values.min()), float(values.max())
    norm = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    heat = colormaps["viridis"](norm)[..., :3]
    gray = np.repeat(np.clip(image, 0, 1)[..., None], 3, axis=2)
    rgb = np.round(255 * ((1 - alpha) * gray + alpha * heat)).astype(np.uint8)
    img = Image.fromarray(rgb).resize((rgb.shape[1] * scale, rgb.shape[0] * scale), Image.NEAREST)
    with atomic_write(path, "wb") as fh:
        img.save(fh, format="PNG")


def _parse_target(text: str | None):
    if text is None:
        return None
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        return parts[0]
    return np.asarray(parts)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    samples, manifest = generate_dataset(cfg.data)
    manifest["run_config"] = cfg.to_dict()
    root = save_dataset(samples, manifest, args.out)
    labels = label_matrix(samples) if cfg.data.n_classes else np.zeros((len(samples), 0))
    scores = cumulative_scores(samples)
    print(f"wrote {len(samples)} images and manifest.json to {root}")
    if labels.shape[1]:
        print("positives per class: " + ", ".join(f"{int(v)}" for v in labels.sum(0)))
    if len(scores):
        print(f"mean cumulative severity score: {scores.mean():.3f}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    samples, _ = load_dataset(args.data)
    images = stack_images(samples)
    kind = cfg.model.kind
    if kind == "classifier":
        labels = label_matrix(samples)
        if labels.shape[1] == 0:
            raise CliError("model.kind=classifier but the dataset has no class labels (n_classes=0)")
        model = build_model(cfg.model_spec(labels.shape[1]))
        model, report = train_classifier(model, images, labels, cfg.train)
    elif kind == "detector":
        model = build_model(cfg.model_spec(3))
        model, report = train_classifier(model, images, detector_labels([s.severity_grid for s in samples]), cfg.train)
    else:
        scores = cumulative_scores(samples)
        if np.ptp(scores) == 0:
            print("warning: severity scores are constant; the regressor will learn a constant", file=sys.stderr)
        model = build_model(cfg.model_spec(1))
        model, report = train_regressor(model, images, scores, cfg.train)
    train_idx, _ = holdout_split(len(images), cfg.train.holdout_fraction, cfg.train.seed)
    stats_batch = images[np.sort(train_idx)[: cfg.attribution.stats_samples]].astype(np.float32)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report_dict = {"run_config": cfg.to_dict(), "seed": cfg.seed, "kind": kind, **report.to_dict()}
    save_checkpoint(out, model, {"run_config": cfg.to_dict(), "kind": kind}, {STATS_KEY: stats_batch})
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    _write_json(report_path, report_dict)
    if report.per_class_auroc is not None:
        print("held-out AUROC per class: " + ", ".join("n/a" if a is None else f"{a:.4f}" for a in report.per_class_auroc))
    if report.holdout_mse is not None:
        print(f"held-out MSE {report.holdout_mse:.4f}, PCC {report.holdout_pcc}")
    print(f"wrote {out} and {report_path}")
    return 0


def cmd_attribute(args) -> int:
    model, extra, stats_batch = _load_model(args.checkpoint)
    cfg = _resolve_config(args, extra.get("run_config"))
    method = args.method
    check_method(method, model)
    target = _parse_target(args.target)
    if model.output_kind == "multilabel_classifier" and target is None:
        raise CliError(f"--target is required for classifier checkpoints (class index 0..{model.spec.n_outputs - 1})")
    images = _read_images(Path(args.input))
    settings = cfg.attribution
    stats = None
    layers = settings.layers_for(method)
    if layers:
        batch = stats_batch if stats_batch is not None else np.stack([im for _, im in images])
        stats = feature_statistics(model, layers, batch, settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(indexed):
        index, (stem, image) = indexed
        seed = derive_seed(cfg.seed, index)
        amap = attribute(model, image, method, settings, stats, target, seed)
        amap = AttributionMap(
            amap.values, amap.units, amap.method,
            {**amap.meta, "image": stem, "image_seed": seed, "seed": cfg.seed, "run_config": cfg.to_dict()},
        )
        amap.save(out / stem)
        render_overlay(image, amap.values, out / f"{stem}_overlay.png")
        return stem

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        done = list(pool.map(run, enumerate(images)))
    print(f"wrote {len(done)} maps and overlays ({method}) to {out}")
    return 0


def _evaluate(model, samples, cfg: RunConfig, stats_batch, jobs: int, config_extra: dict | None = None):
    ev = cfg.evaluation
    return compare_methods(
        model, samples, ev.methods, ev.metrics, cfg.attribution, ev.settings, cfg.seed,
        stats_images=stats_batch, jobs=jobs, config={**cfg.to_dict(), **(config_extra or {})},
    )


def cmd_evaluate(args) -> int:
    model, extra, stats_batch = _load_model(args.checkpoint)
    cfg = _resolve_config(args, extra.get("run_config"))
    samples, _ = load_dataset(args.data)
    report = _evaluate(model, samples, cfg, stats_batch, args.jobs)
    out = Path(args.out)
    report.save(out / "report.json")
    report.save_curves(out / "curves")
    if "insertion" in report.metrics and "deletion" in report.metrics:
        plot_insertion_deletion(report, out / "insertion_deletion.png")
    for method, agg in report.aggregates().items():
        summary = ", ".join(f"{k}={v:.4f}" for k, v in agg.items() if isinstance(v, float))
        print(f"{method}: {summary}")
    print(f"wrote {out / 'report.json'}")
    return 0


def cmd_compare(args) -> int:
    """Evaluate the same methods for several checkpoints (e.g. weighted vs unweighted BCE)."""
    cfg = None
    samples, _ = load_dataset(args.data)
    rows = {}
    for path in args.checkpoints:
        model, extra, stats_batch = _load_model(path)
        cfg = _resolve_config(args, extra.get("run_config"))
        report = _evaluate(model, samples, cfg, stats_batch, args.jobs)
        report_path = Path(path).with_suffix(".report.json")
        training = {}
        if report_path.exists():
            training = json.loads(report_path.read_text())
        rows[str(path)] = {
            "aggregates": report.aggregates(),
            "config_fingerprint": report.to_dict()["config_fingerprint"],
            "holdout_auroc": training.get("per_class_auroc"),
            "holdout_pcc": training.get("holdout_pcc"),
        }
    payload = {"checkpoints": list(map(str, args.checkpoints)), "data": str(args.data), "seed": cfg.seed, "results": rows}
    out = Path(args.out)
    _write_json(out / "compare.json", payload)
    print(f"wrote {out / 'compare.json'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibattr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. data.samples=10")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers for per-image work")
        p.add_argument("--out", required=True, help="output path")

    def attribution_flags(p):
        p.add_argument("--layer", help="bottleneck layer for single-layer methods")
        p.add_argument("--layers", help="comma-separated layers for multilayer-iba")
        p.add_argument("--threshold", help="threshold policy, e.g. percentile:95")
        p.add_argument("--target-value", type=float, help="regression target for regression-iba:mse")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a classifier, detector or regressor")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="training report path (default: <out>.report.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attribute", help="attribution maps and overlays for images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="a .png image, a directory of images, or a dataset root")
    p.add_argument("--method", required=True, choices=METHOD_NAMES)
    p.add_argument("--target", help="class index (or comma-separated label vector) for classifiers")
    attribution_flags(p)
    p.set_defaults(func=cmd_attribute)

    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "metric suite for several methods on one checkpoint"),
        ("compare", cmd_compare, "metric suite across several checkpoints"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p)
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True)
        else:
            p.add_argument("--checkpoints", required=True, nargs="+")
        p.add_argument("--data", required=True)
        p.add_argument("--methods", help="comma-separated method names")
        p.add_argument("--metrics", help="comma-separated metrics")
        attribution_flags(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
