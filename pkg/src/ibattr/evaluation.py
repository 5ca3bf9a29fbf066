"""Feature-importance and ground-truth metrics for attribution maps, plus baseline methods."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from scipy.stats import spearmanr

from .adapter import TorchAdapter, as_batch, select_output
from .maps import AttributionMap, ThresholdPolicy, atomic_write
from .synthetic import GRID_SHAPE, region_bounds

DEFAULT_FRACTIONS = tuple(float(v) for v in np.round(np.geomspace(0.01, 0.8, 8), 4))


def default_blur_sigma(shape: tuple[int, int]) -> float:
    """8 px at 64×64, scaled with the image side."""
    return 8.0 * min(shape) / 64.0


def blurred_baseline(image: np.ndarray, sigma: float | None = None) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return gaussian_filter(image, sigma if sigma is not None else default_blur_sigma(image.shape), mode="reflect")


def _values(attribution) -> np.ndarray:
    return attribution.values if isinstance(attribution, AttributionMap) else np.asarray(attribution, dtype=np.float64)


@torch.no_grad()
def _scores(model: TorchAdapter, images: np.ndarray, target, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model.score(as_batch(images[start : start + batch_size], model.dtype), target))
    return torch.cat(out).double().numpy()


def pixel_ranking(values: np.ndarray) -> np.ndarray:
    """Flat pixel indices by decreasing value; ties keep row-major order."""
    return np.argsort(-values.ravel(), kind="stable")


# ---------------------------------------------------------------------------
# insertion / deletion
# ---------------------------------------------------------------------------


@dataclass
class PerturbationCurve:
    fractions: np.ndarray
    scores: np.ndarray
    auc: float
    mode: str = "deletion"
    constant_attribution: bool = False

    def to_csv(self, path) -> None:
        with atomic_write(path, "w") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["fraction", "score"])
            for f, s in zip(self.fractions, self.scores):
                writer.writerow([f"{f:.6g}", f"{s:.10g}"])


def insertion_deletion(
    model: TorchAdapter,
    image: np.ndarray,
    attribution,
    mode: str = "deletion",
    steps: int = 50,
    blur_sigma: float | None = None,
    target=None,
) -> PerturbationCurve:
    """Model output as top-ranked pixels are restored to (insertion) or removed
    from (deletion) the image, with a Gaussian-blurred copy as the baseline.

    Pixels are processed in ``steps`` equal chunks; the AUC is the trapezoid
    rule over fractions in [0, 1].
    """
    if mode not in ("insertion", "deletion"):
        raise ValueError(f"unknown mode {mode!r}")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    image = np.asarray(image, dtype=np.float64)
    values = _values(attribution)
    if values.shape != image.shape:
        raise ValueError(f"attribution shape {values.shape} differs from image shape {image.shape}")
    blurred = blurred_baseline(image, blur_sigma)
    order = pixel_ranking(values)
    n = image.size
    fractions = np.linspace(0.0, 1.0, steps + 1)
    start, source = (blurred, image) if mode == "insertion" else (image, blurred)
    frames = np.empty((steps + 1, *image.shape))
    current = start.ravel().copy()
    done = 0
    for k, frac in enumerate(fractions):
        upto = int(round(frac * n))
        idx = order[done:upto]
        current[idx] = source.ravel()[idx]
        done = upto
        frames[k] = current.reshape(image.shape)
    scores = _scores(model, frames, target)
    auc = float(np.trapezoid(scores, fractions))
    return PerturbationCurve(fractions, scores, auc, mode, bool(np.ptp(values) == 0))


# ---------------------------------------------------------------------------
# sensitivity-n
# ---------------------------------------------------------------------------


class Correlation(NamedTuple):
    value: float
    degenerate: bool


def _pearson(a: np.ndarray, b: np.ndarray) -> Correlation:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom <= 1e-300 or np.ptp(a) <= 1e-12 * (1 + np.abs(a).max()) or np.ptp(b) <= 1e-12 * (1 + np.abs(b).max()):
        return Correlation(0.0, True)
    return Correlation(float(np.clip((a @ b) / denom, -1.0, 1.0)), False)


@dataclass
class SensitivityResult:
    fractions: list[float]
    correlations: list[float]
    degenerate: list[bool]

    def mean(self, lo: float = 0.0, hi: float = 1.0) -> float:
        picked = [c for f, c in zip(self.fractions, self.correlations) if lo <= f <= hi]
        return float(np.mean(picked)) if picked else float("nan")

    def as_dict(self) -> dict[str, float]:
        return {f"{f:g}": c for f, c in zip(self.fractions, self.correlations)}


def sensitivity_n(
    model: TorchAdapter,
    image: np.ndarray,
    attribution,
    n_fractions: Sequence[float] = DEFAULT_FRACTIONS,
    masks_per_n: int = 100,
    seed: int = 0,
    target=None,
    baseline: np.ndarray | float | None = None,
    blur_sigma: float | None = None,
) -> SensitivityResult:
    """Pearson correlation between the output drop under random masking and the
    attribution mass of the masked pixels, for each masked fraction ``n``.

    Masked pixels take the ``baseline`` value (blurred image by default).
    Works for classifier targets and scalar regressors alike.
    """
    if masks_per_n < 10:
        raise ValueError("masks_per_n must be >= 10")
    image = np.asarray(image, dtype=np.float64)
    values = _values(attribution)
    if values.shape != image.shape:
        raise ValueError("attribution and image shapes differ")
    if baseline is None:
        base = blurred_baseline(image, blur_sigma)
    else:
        base = np.broadcast_to(np.asarray(baseline, dtype=np.float64), image.shape)
    rng = np.random.default_rng(seed)
    reference = _scores(model, image[None], target)[0]
    n_pix = image.size
    flat_img, flat_base, flat_val = image.ravel(), base.ravel(), values.ravel()
    fractions, corrs, flags = [], [], []
    for frac in n_fractions:
        if not 0 < frac < 1:
            raise ValueError("fractions must lie in (0, 1)")
        k = max(1, int(math.floor(frac * n_pix)))
        frames = np.repeat(flat_img[None], masks_per_n, axis=0)
        mass = np.empty(masks_per_n)
        for m in range(masks_per_n):
            idx = rng.choice(n_pix, size=k, replace=False)
            frames[m, idx] = flat_base[idx]
            mass[m] = flat_val[idx].sum()
        drops = reference - _scores(model, frames.reshape(masks_per_n, *image.shape), target)
        corr = _pearson(drops, mass)
        fractions.append(float(frac))
        corrs.append(corr.value)
        flags.append(corr.degenerate)
    return SensitivityResult(fractions, corrs, flags)


# ---------------------------------------------------------------------------
# ground-truth metrics
# ---------------------------------------------------------------------------


def iou(binary: np.ndarray, ground_truth: np.ndarray) -> float:
    binary = np.asarray(binary, dtype=bool)
    ground_truth = np.asarray(ground_truth, dtype=bool)
    union = np.logical_or(binary, ground_truth).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(binary, ground_truth).sum() / union)


def localization_iou(attribution, ground_truth: np.ndarray, threshold_policy: ThresholdPolicy | None = None) -> float:
    """IoU between the thresholded attribution and a ground-truth mask.

    Binary maps are used as they are.
    """
    ground_truth = np.asarray(ground_truth, dtype=bool)
    if not ground_truth.any():
        raise ValueError("ground truth mask is empty")
    if isinstance(attribution, AttributionMap) and attribution.units == "binary":
        binary = attribution.values > 0.5
    else:
        binary = (threshold_policy or ThresholdPolicy()).binarize(_values(attribution))
    return iou(binary, ground_truth)


@dataclass
class DatasetIoU:
    mean: float
    per_image: list[float | None]
    skipped: int


def dataset_iou(attributions: Sequence, ground_truths: Sequence[np.ndarray], threshold_policy: ThresholdPolicy | None = None) -> DatasetIoU:
    """Mean of per-image IoU; images with empty ground truth are skipped and counted."""
    per_image: list[float | None] = []
    for amap, gt in zip(attributions, ground_truths):
        per_image.append(None if not np.asarray(gt).any() else localization_iou(amap, gt, threshold_policy))
    scored = [v for v in per_image if v is not None]
    return DatasetIoU(float(np.mean(scored)) if scored else float("nan"), per_image, len(per_image) - len(scored))


def severity_correlation(attribution, severity: np.ndarray) -> Correlation:
    """Pearson correlation of the flattened attribution and severity maps."""
    values = _values(attribution)
    severity = np.asarray(severity, dtype=np.float64)
    if values.shape != severity.shape:
        raise ValueError("attribution and severity map shapes differ")
    return _pearson(values, severity)


def region_masses(attribution, grid_shape: tuple[int, int] = GRID_SHAPE) -> np.ndarray:
    """Attribution mass summed inside each region of the severity grid."""
    values = _values(attribution)
    rows = region_bounds(values.shape[0], grid_shape[0])
    cols = region_bounds(values.shape[1], grid_shape[1])
    return np.array([[values[r0:r1, c0:c1].sum() for c0, c1 in cols] for r0, r1 in rows])


def region_rank_correlation(attribution, severity_grid: np.ndarray) -> Correlation:
    """Spearman correlation between per-region attribution mass and region severity."""
    grid = np.asarray(severity_grid, dtype=np.float64)
    mass = region_masses(attribution, grid.shape)
    if np.ptp(grid) == 0 or np.ptp(mass) == 0:
        return Correlation(0.0, True)
    return Correlation(float(spearmanr(mass.ravel(), grid.ravel()).statistic), False)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def _target_output(model: TorchAdapter, x: torch.Tensor, target) -> torch.Tensor:
    return select_output(model(x), model.output_kind, target)


def gradient_map(model: TorchAdapter, image, target=None) -> np.ndarray:
    x = as_batch(image, model.dtype).clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(_target_output(model, x, target).sum(), x)
    return grad[0].abs().sum(0).double().numpy()


def integrated_gradients_map(model: TorchAdapter, image, target=None, steps: int = 32, baseline=None) -> np.ndarray:
    """Midpoint-rule path integral from ``baseline`` (zeros by default) to the image."""
    if steps < 1:
        raise ValueError("integrated gradients needs steps >= 1")
    x = as_batch(image, model.dtype)
    base = torch.zeros_like(x) if baseline is None else as_batch(baseline, model.dtype)
    alphas = (torch.arange(steps, dtype=model.dtype) + 0.5) / steps
    path = (base + alphas[:, None, None, None] * (x - base)).requires_grad_(True)
    (grads,) = torch.autograd.grad(_target_output(model, path, target).sum(), path)
    return ((x - base)[0] * grads.mean(0)).sum(0).double().numpy()


def occlusion_map(model: TorchAdapter, image, target=None, window: int = 8, stride: int = 4, blur_sigma: float | None = None) -> np.ndarray:
    """Average score drop when a sliding window is replaced by the blurred image."""
    image = np.asarray(image, dtype=np.float64)
    blurred = blurred_baseline(image, blur_sigma)
    h, w = image.shape
    ys = list(range(0, max(h - window, 0) + 1, stride))
    xs = list(range(0, max(w - window, 0) + 1, stride))
    if ys[-1] + window < h:
        ys.append(h - window)
    if xs[-1] + window < w:
        xs.append(w - window)
    frames, boxes = [], []
    for y in ys:
        for x in xs:
            frame = image.copy()
            frame[y : y + window, x : x + window] = blurred[y : y + window, x : x + window]
            frames.append(frame)
            boxes.append((y, x))
    reference = _scores(model, image[None], target)[0]
    drops = reference - _scores(model, np.stack(frames), target)
    total = np.zeros_like(image)
    count = np.zeros_like(image)
    for (y, x), d in zip(boxes, drops):
        total[y : y + window, x : x + window] += d
        count[y : y + window, x : x + window] += 1
    return total / np.maximum(count, 1)


def random_map(shape: tuple[int, int], seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).random(shape)


def baseline_attribution(model: TorchAdapter, image, target=None, method: str = "gradient", **params) -> AttributionMap:
    """Comparison baselines: ``gradient``, ``integrated_gradients``, ``occlusion``, ``random``."""
    image = np.asarray(image, dtype=np.float64)
    if method == "gradient":
        values = gradient_map(model, image, target)
    elif method == "integrated_gradients":
        values = integrated_gradients_map(model, image, target, **params)
    elif method == "occlusion":
        values = occlusion_map(model, image, target, **params)
    elif method == "random":
        values = random_map(image.shape, params.get("seed", 0))
    else:
        raise ValueError(f"unknown baseline method {method!r}")
    meta = {k: v for k, v in params.items() if isinstance(v, (int, float, str))}
    if target is not None:
        meta["target"] = int(target) if np.ndim(target) == 0 else [int(v) for v in np.asarray(target)]
    return AttributionMap(values, units="unitless", method=method, meta=meta)
