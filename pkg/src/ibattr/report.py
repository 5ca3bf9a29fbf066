"""Run several attribution methods over a dataset and summarize the metrics."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapter import TorchAdapter
from .evaluation import (
    DEFAULT_FRACTIONS,
    PerturbationCurve,
    insertion_deletion,
    localization_iou,
    region_rank_correlation,
    sensitivity_n,
    severity_correlation,
)
from .maps import ThresholdPolicy, atomic_write, dumps_json
from .methods import AttributionSettings, attribute, check_method, derive_seed, feature_statistics
from .models import detector_labels
from .synthetic import SyntheticSample, box_mask, region_mask, severity_map, stack_images

METRICS = ("insertion", "deletion", "sensitivity_n", "iou", "pcc", "region_rho")
# severities covered by each output of the 3-output detector
DETECTOR_SEVERITIES = ((3,), (2,), (0, 1))


@dataclass(frozen=True)
class EvaluationSettings:
    steps: int = 50
    blur_sigma: float | None = None
    n_fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    masks_per_n: int = 100
    iou_threshold: str = "percentile:70"

    def __post_init__(self) -> None:
        object.__setattr__(self, "n_fractions", tuple(float(f) for f in self.n_fractions))
        ThresholdPolicy.parse(self.iou_threshold)

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "blur_sigma": self.blur_sigma,
            "n_fractions": list(self.n_fractions),
            "masks_per_n": self.masks_per_n,
            "iou_threshold": self.iou_threshold,
        }


@dataclass
class Item:
    """One (image, target) pair to explain."""

    index: int
    sample: SyntheticSample
    target: int | None
    ground_truth: np.ndarray | None


def fingerprint(config: dict) -> str:
    return hashlib.sha256(dumps_json(config).encode()).hexdigest()[:16]


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class EvaluationReport:
    """Per-image metrics for each method; aggregates are derived from them."""

    methods: list[str]
    metrics: list[str]
    per_image: dict[str, list[dict]]
    config: dict
    seed: int
    skipped_images: int = 0
    curves: dict[str, PerturbationCurve] = field(default_factory=dict, repr=False)

    def aggregates(self) -> dict[str, dict]:
        out = {}
        for method in self.methods:
            rows = self.per_image[method]
            agg: dict = {"n_items": len(rows)}
            if "insertion" in self.metrics:
                agg["mean_insertion_auc"] = _mean(r["insertion_auc"] for r in rows)
            if "deletion" in self.metrics:
                agg["mean_deletion_auc"] = _mean(r["deletion_auc"] for r in rows)
            if "sensitivity_n" in self.metrics:
                keys = list(rows[0]["sensitivity_n"]) if rows else []
                agg["sensitivity_n"] = {k: _mean(r["sensitivity_n"][k] for r in rows) for k in keys}
            if "iou" in self.metrics:
                agg["mean_iou"] = _mean(r["iou"] for r in rows)
                agg["iou_skipped"] = sum(r["iou"] is None for r in rows)
            if "pcc" in self.metrics:
                agg["mean_pcc"] = _mean(r["pcc"] for r in rows)
                agg["pcc_degenerate"] = sum(r["pcc"] is None for r in rows)
            if "region_rho" in self.metrics:
                agg["mean_region_rho"] = _mean(r["region_rho"] for r in rows)
                agg["region_rho_degenerate"] = sum(r["region_rho"] is None for r in rows)
            out[method] = agg
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_fingerprint": fingerprint(self.config),
            "seed": self.seed,
            "methods": self.methods,
            "metrics": self.metrics,
            "skipped_images": self.skipped_images,
            "aggregates": self.aggregates(),
            "per_image": self.per_image,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with atomic_write(path, "w") as fh:
            fh.write(dumps_json(self.to_dict()))
        return path

    def save_curves(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for key, curve in sorted(self.curves.items()):
            path = directory / f"{key}.csv"
            curve.to_csv(path)
            paths.append(path)
        return paths


def build_items(model: TorchAdapter, samples: Sequence[SyntheticSample]) -> tuple[list[Item], int]:
    """Expand samples into explainable items; returns the items and the number of skipped images.

    Classifiers: one item per positive class, with the class's boxes as ground
    truth (or, for the 3-output detector on severity data, its regions).
    Regressors: one item per image, with the nonzero-severity regions as ground truth.
    """
    items: list[Item] = []
    skipped = 0
    for i, s in enumerate(samples):
        shape = s.image.shape
        if model.output_kind == "scalar_regressor":
            gt = region_mask(s.severity_grid, shape, (1, 2, 3))
            items.append(Item(i, s, None, gt if gt.any() else None))
            continue
        n_out = model.spec.n_outputs if hasattr(model, "spec") else None
        if len(s.class_labels) == 0 and n_out == len(DETECTOR_SEVERITIES):
            labels = detector_labels([s.severity_grid])[0]
            masks = [region_mask(s.severity_grid, shape, sev) for sev in DETECTOR_SEVERITIES]
        else:
            labels = s.class_labels
            masks = [box_mask(s.boxes, shape, c) for c in range(len(labels))]
        positives = np.flatnonzero(labels)
        if positives.size == 0:
            skipped += 1
        for c in positives:
            gt = masks[int(c)]
            items.append(Item(i, s, int(c), gt if gt.any() else None))
    return items, skipped


def _check_metrics(metrics: Sequence[str], items: Sequence[Item]) -> None:
    for metric in metrics:
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; choose from {', '.join(METRICS)}")
    if "iou" in metrics and not any(it.ground_truth is not None for it in items):
        raise ValueError("metric 'iou' needs box or severity annotations, and none are present")
    if ("pcc" in metrics or "region_rho" in metrics) and not any(np.ptp(it.sample.severity_grid) > 0 for it in items):
        raise ValueError("metrics 'pcc'/'region_rho' need non-constant severity annotations, and none are present")


def _evaluate_item(model, item: Item, method, settings, stats, ev: EvaluationSettings, metrics, seed) -> tuple[dict, dict]:
    item_seed = derive_seed(seed, item.index)
    amap = attribute(model, item.sample.image, method, settings, stats, item.target, item_seed)
    row: dict = {"id": item.sample.id, "target": item.target}
    curves = {}
    for mode in ("insertion", "deletion"):
        if mode in metrics:
            curve = insertion_deletion(model, item.sample.image, amap, mode, ev.steps, ev.blur_sigma, item.target)
            row[f"{mode}_auc"] = curve.auc
            row[f"{mode}_constant_attribution"] = curve.constant_attribution
            curves[mode] = curve
    if "sensitivity_n" in metrics:
        res = sensitivity_n(
            model, item.sample.image, amap, ev.n_fractions, ev.masks_per_n, item_seed, item.target,
            blur_sigma=ev.blur_sigma,
        )
        row["sensitivity_n"] = res.as_dict()
    if "iou" in metrics:
        gt = item.ground_truth
        row["iou"] = None if gt is None else localization_iou(amap, gt, ThresholdPolicy.parse(ev.iou_threshold))
    grid = item.sample.severity_grid
    if "pcc" in metrics:
        corr = severity_correlation(amap, severity_map(grid, item.sample.image.shape))
        row["pcc"] = None if corr.degenerate else corr.value
    if "region_rho" in metrics:
        corr = region_rank_correlation(amap, grid)
        row["region_rho"] = None if corr.degenerate else corr.value
    return row, curves


def _mean_curve(curves: list[PerturbationCurve]) -> PerturbationCurve:
    scores = np.mean([c.scores for c in curves], axis=0)
    fractions = curves[0].fractions
    return PerturbationCurve(fractions, scores, float(np.trapezoid(scores, fractions)), curves[0].mode)


def compare_methods(
    model: TorchAdapter,
    samples: Sequence[SyntheticSample],
    methods: Sequence[str],
    metrics: Sequence[str],
    settings: AttributionSettings | None = None,
    evaluation: EvaluationSettings | None = None,
    seed: int = 0,
    stats_images: np.ndarray | None = None,
    jobs: int = 1,
    config: dict | None = None,
) -> EvaluationReport:
    """Evaluate each method on every (image, target) item of ``samples``.

    ``stats_images`` feed the feature statistics (default: the first images of
    ``samples``). Seeds are derived per image index, so results do not depend
    on ``jobs``.
    """
    settings = settings or AttributionSettings()
    evaluation = evaluation or EvaluationSettings()
    methods, metrics = list(methods), list(metrics)
    if not methods or not metrics:
        raise ValueError("at least one method and one metric are required")
    for method in methods:
        check_method(method, model)
    items, skipped = build_items(model, samples)
    _check_metrics(metrics, items)
    layers = sorted({layer for m in methods for layer in settings.layers_for(m)})
    stats = feature_statistics(model, layers, stack_images(samples) if stats_images is None else stats_images, settings)

    per_image: dict[str, list[dict]] = {}
    curves: dict[str, PerturbationCurve] = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for method in methods:
            results = list(pool.map(
                lambda it: _evaluate_item(model, it, method, settings, stats, evaluation, metrics, seed), items
            ))
            per_image[method] = [row for row, _ in results]
            for mode in ("insertion", "deletion"):
                if mode in metrics and results:
                    curves[f"{method}_{mode}"] = _mean_curve([c[mode] for _, c in results])
    config = config if config is not None else {
        "attribution": settings.to_dict(), "evaluation": evaluation.to_dict(), "seed": seed
    }
    return EvaluationReport(methods, metrics, per_image, config, seed, skipped, curves)


def plot_insertion_deletion(report: EvaluationReport, path) -> Path:
    """Mean deletion AUC (x) against mean insertion AUC (y); the top left corner is best."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agg = report.aggregates()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for method in report.methods:
        x, y = agg[method].get("mean_deletion_auc"), agg[method].get("mean_insertion_auc")
        if x is None or y is None:
            continue
        ax.scatter([x], [y], s=40)
        ax.annotate(method, (x, y), textcoords="offset points", xytext=(5, 4), fontsize=8)
    ax.set_xlabel("deletion AUC (lower is better)")
    ax.set_ylabel("insertion AUC (higher is better)")
    ax.set_title("insertion vs deletion")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with atomic_write(path, "wb") as fh:
        fig.savefig(fh, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
