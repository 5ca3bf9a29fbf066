"""Seed-reproducible grayscale images with planted features and a 3×2 severity grid.

Two kinds of signal can be planted:

* class patches: a localized pattern per positive class, recorded as a
  box ``(class, x, y, w, h)``;
* severity texture: each of the six regions (three row bands × two column
  halves, the analog of three zones per lung) carries a fine checkerboard
  whose peak-to-peak contrast is ``severity * contrast_scale / 3``.

Both patterns are zero-mean or compact, so a strong Gaussian blur removes
them while keeping the smooth background.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .maps import atomic_write, dumps_json

FEATURE_KINDS = ("blob", "texture", "edge")
GRID_SHAPE = (3, 2)
MAX_SEVERITY = 3


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    n_classes: int = 2
    samples: int = 100
    feature_kinds: tuple[str, ...] = ("blob", "texture")
    patch_size: int = 12
    noise_level: float = 0.03
    contrast_scale: float = 0.5
    redundancy_rate: float = 0.0
    class_prevalence: float | tuple[float, ...] = 0.5
    severity_weights: tuple[float, ...] = (1.0, 0.0, 0.0, 0.0)
    background_level: float = 0.4
    background_variation: float = 0.08
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "feature_kinds", tuple(self.feature_kinds))
        object.__setattr__(self, "severity_weights", tuple(float(w) for w in self.severity_weights))
        if not isinstance(self.class_prevalence, (int, float)):
            object.__setattr__(self, "class_prevalence", tuple(float(p) for p in self.class_prevalence))
        if self.image_size < 8 or self.samples < 0 or self.n_classes < 0:
            raise ValueError("image_size must be >= 8, samples and n_classes non-negative")
        if not self.feature_kinds or any(k not in FEATURE_KINDS for k in self.feature_kinds):
            raise ValueError(f"feature_kinds must be drawn from {FEATURE_KINDS}")
        if not 0.0 <= self.redundancy_rate <= 1.0:
            raise ValueError("redundancy_rate must lie in [0, 1]")
        if not 0 <= self.noise_level < self.contrast_scale:
            raise ValueError("noise_level must be below contrast_scale")
        if len(self.severity_weights) != MAX_SEVERITY + 1 or min(self.severity_weights) < 0 or sum(self.severity_weights) <= 0:
            raise ValueError("severity_weights needs 4 non-negative entries with positive sum")
        if any(not 0.0 <= p <= 1.0 for p in self.prevalences):
            raise ValueError("class_prevalence entries must lie in [0, 1]")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")

    @property
    def prevalences(self) -> tuple[float, ...]:
        if isinstance(self.class_prevalence, tuple):
            if len(self.class_prevalence) != self.n_classes:
                raise ValueError("class_prevalence needs one entry per class")
            return self.class_prevalence
        return (float(self.class_prevalence),) * self.n_classes

    def kind_of(self, cls: int) -> str:
        return self.feature_kinds[cls % len(self.feature_kinds)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSample:
    image: np.ndarray
    class_labels: np.ndarray
    boxes: list[tuple[int, int, int, int, int]] = field(default_factory=list)
    severity_grid: np.ndarray = field(default_factory=lambda: np.zeros(GRID_SHAPE, dtype=np.int64))
    id: str = ""

    @property
    def cumulative_score(self) -> int:
        return int(np.asarray(self.severity_grid).sum())

    def annotation(self) -> dict:
        return {
            "id": self.id,
            "labels": [int(v) for v in self.class_labels],
            "boxes": [dict(zip(("class", "x", "y", "w", "h"), map(int, b))) for b in self.boxes],
            "severity_grid": np.asarray(self.severity_grid).astype(int).tolist(),
            "cumulative_score": self.cumulative_score,
        }


def region_bounds(size: int, parts: int) -> list[tuple[int, int]]:
    """Split ``[0, size)`` into ``parts`` bands; earlier bands take the remainder."""
    edges = np.cumsum([0] + [len(a) for a in np.array_split(np.arange(size), parts)])
    return [(int(edges[i]), int(edges[i + 1])) for i in range(parts)]


def severity_map(sample: SyntheticSample | np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Pixelwise severity: each pixel takes the score of its region."""
    if isinstance(sample, SyntheticSample):
        grid = np.asarray(sample.severity_grid)
        shape = shape or sample.image.shape
    else:
        grid = np.asarray(sample)
        if shape is None:
            raise ValueError("shape is required when passing a bare grid")
    if grid.shape != GRID_SHAPE:
        raise ValueError(f"severity grid must be {GRID_SHAPE}, got {grid.shape}")
    out = np.zeros(shape, dtype=np.int64)
    for i, (r0, r1) in enumerate(region_bounds(shape[0], GRID_SHAPE[0])):
        for j, (c0, c1) in enumerate(region_bounds(shape[1], GRID_SHAPE[1])):
            out[r0:r1, c0:c1] = grid[i, j]
    return out


def region_mask(grid: np.ndarray, shape: tuple[int, int], severities: Sequence[int]) -> np.ndarray:
    """Union of the regions whose severity is in ``severities``."""
    return np.isin(severity_map(np.asarray(grid), shape), list(severities))


def box_mask(boxes, shape: tuple[int, int], cls: int | None = None) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for c, x, y, w, h in boxes:
        if cls is None or c == cls:
            mask[y : y + h, x : x + w] = True
    return mask


def _checker(h: int, w: int, cell: int = 2) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.where(((yy // cell) + (xx // cell)) % 2 == 0, 0.5, -0.5)


def patch_pattern(kind: str, size: int, contrast: float) -> np.ndarray:
    """A ``size``×``size`` pattern that is exactly zero outside its box."""
    if kind == "blob":
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        return contrast * np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2 * (size / 4.0) ** 2))
    if kind == "texture":
        return contrast * 2 * _checker(size, size)
    if kind == "edge":
        out = np.zeros((size, size))
        t = max(1, size // 6)
        out[:t, :] = out[-t:, :] = out[:, :t] = out[:, -t:] = contrast
        return out
    raise ValueError(f"unknown feature kind {kind!r}")


def _place(rng: np.random.Generator, size: int, image_size: int, taken: list, margin: int = 2, tries: int = 2000):
    lo, hi = margin, image_size - size - margin
    if hi < lo:
        raise ValueError(f"patch of size {size} does not fit in a {image_size}px image")
    for _ in range(tries):
        x, y = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        if all(x + size + margin <= bx or bx + bw + margin <= x or y + size + margin <= by or by + bh + margin <= y
               for _, bx, by, bw, bh in taken):
            return x, y
    raise ValueError("infeasible placement: could not fit all patches without overlap")


def _background(rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    n = cfg.image_size
    field_ = gaussian_filter(rng.normal(size=(n, n)), sigma=n / 8.0, mode="wrap")
    field_ /= field_.std() + 1e-12
    return cfg.background_level + cfg.background_variation * field_


def generate_sample(cfg: GeneratorConfig, index: int, severity_grid: np.ndarray | None = None) -> SyntheticSample:
    """Pure function of ``(cfg, cfg.seed, index)``.

    ``severity_grid`` replaces the sampled grid (the random stream is unchanged).
    """
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.image_size
    image = _background(rng, cfg)

    weights = np.asarray(cfg.severity_weights) / sum(cfg.severity_weights)
    grid = rng.choice(MAX_SEVERITY + 1, size=GRID_SHAPE, p=weights).astype(np.int64)
    if severity_grid is not None:
        grid = np.asarray(severity_grid, dtype=np.int64)
        if grid.shape != GRID_SHAPE or grid.min() < 0 or grid.max() > MAX_SEVERITY:
            raise ValueError(f"severity_grid must be {GRID_SHAPE} with entries in 0..{MAX_SEVERITY}")
    if grid.any():
        texture = _checker(n, n)
        pad = 3
        for i, (r0, r1) in enumerate(region_bounds(n, GRID_SHAPE[0])):
            for j, (c0, c1) in enumerate(region_bounds(n, GRID_SHAPE[1])):
                amp = grid[i, j] * cfg.contrast_scale / MAX_SEVERITY
                image[r0 + pad : r1 - pad, c0 + pad : c1 - pad] += amp * texture[r0 + pad : r1 - pad, c0 + pad : c1 - pad]

    labels = (rng.random(cfg.n_classes) < np.asarray(cfg.prevalences)).astype(np.int64)
    boxes: list[tuple[int, int, int, int, int]] = []
    size = cfg.patch_size
    for cls in np.flatnonzero(labels):
        copies = 2 if rng.random() < cfg.redundancy_rate else 1
        pattern = patch_pattern(cfg.kind_of(int(cls)), size, cfg.contrast_scale)
        for _ in range(copies):
            x, y = _place(rng, size, n, boxes)
            image[y : y + size, x : x + size] += pattern
            boxes.append((int(cls), x, y, size, size))

    image += cfg.noise_level * rng.normal(size=(n, n))
    return SyntheticSample(np.clip(image, 0.0, 1.0), labels, boxes, grid, id=f"{index:05d}")


def generate_dataset(cfg: GeneratorConfig) -> tuple[list[SyntheticSample], dict]:
    samples = [generate_sample(cfg, i) for i in range(cfg.samples)]
    return samples, build_manifest(cfg, samples)


def build_manifest(cfg: GeneratorConfig, samples: Sequence[SyntheticSample]) -> dict:
    """Plain JSON types only, so the manifest compares equal to its reloaded copy."""
    return json.loads(dumps_json({"config": cfg.to_dict(), "samples": [s.annotation() for s in samples]}))


def stack_images(samples: Sequence[SyntheticSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 0, 0))
    return np.stack([s.image for s in samples])


def label_matrix(samples: Sequence[SyntheticSample]) -> np.ndarray:
    return np.stack([s.class_labels for s in samples]).astype(np.float64)


def cumulative_scores(samples: Sequence[SyntheticSample]) -> np.ndarray:
    return np.array([s.cumulative_score for s in samples], dtype=np.float64)


def save_dataset(samples: Sequence[SyntheticSample], manifest: dict, root) -> Path:
    """Write ``{root}/images/{id}.png`` (8-bit grayscale) and ``{root}/manifest.json``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        pixels = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        with atomic_write(root / "images" / f"{s.id}.png", "wb") as fh:
            Image.fromarray(pixels).save(fh, format="PNG")
    with atomic_write(root / "manifest.json", "w") as fh:
        fh.write(dumps_json(manifest))
    return root


def load_dataset(root) -> tuple[list[SyntheticSample], dict]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for entry in manifest["samples"]:
        pixels = np.asarray(Image.open(root / "images" / f"{entry['id']}.png"), dtype=np.float64) / 255.0
        boxes = [(b["class"], b["x"], b["y"], b["w"], b["h"]) for b in entry["boxes"]]
        samples.append(
            SyntheticSample(
                pixels,
                np.asarray(entry["labels"], dtype=np.int64),
                boxes,
                np.asarray(entry["severity_grid"], dtype=np.int64).reshape(GRID_SHAPE),
                id=entry["id"],
            )
        )
    return samples, manifest
