"""One entry point for every attribution method, keyed by its command-line name."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .adapter import TorchAdapter
from .bottleneck import (
    BottleneckConfig,
    FeatureStatistics,
    estimate_feature_statistics,
    iba_attribute,
    inverse_iba_attribute,
    multilayer_iba,
    regression_iba_attribute,
)
from .evaluation import baseline_attribution
from .maps import AttributionMap, ThresholdPolicy

METHOD_NAMES = (
    "iba",
    "inverse-iba",
    "regression-iba:mse",
    "regression-iba:rm",
    "regression-iba:dv",
    "multilayer-iba",
    "gradient",
    "integrated-gradients",
    "occlusion",
    "random",
)
CLASSIFIER_ONLY = ("iba", "inverse-iba", "multilayer-iba")
BOTTLENECK_METHODS = CLASSIFIER_ONLY + ("regression-iba:mse", "regression-iba:rm", "regression-iba:dv")


@dataclass(frozen=True)
class AttributionSettings:
    """Knobs shared by all methods; each method reads the ones it needs."""

    layer: str = "block2"
    layers: tuple[str, ...] = ("block1", "block2", "block3")
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    threshold: str = "percentile:70"
    target_value: float | None = None
    ig_steps: int = 32
    occlusion_window: int = 8
    occlusion_stride: int = 4
    stats_samples: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if isinstance(self.bottleneck, Mapping):
            object.__setattr__(self, "bottleneck", BottleneckConfig(**self.bottleneck))
        ThresholdPolicy.parse(self.threshold)
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be >= 1")
        if self.stats_samples < 2:
            raise ValueError("stats_samples must be >= 2")

    @property
    def threshold_policy(self) -> ThresholdPolicy:
        return ThresholdPolicy.parse(self.threshold)

    def layers_for(self, method: str) -> tuple[str, ...]:
        if method == "multilayer-iba":
            return self.layers
        if method in BOTTLENECK_METHODS:
            return (self.layer,)
        return ()

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "layers": list(self.layers),
            "bottleneck": self.bottleneck.to_dict(),
            "threshold": self.threshold,
            "target_value": self.target_value,
            "ig_steps": self.ig_steps,
            "occlusion_window": self.occlusion_window,
            "occlusion_stride": self.occlusion_stride,
            "stats_samples": self.stats_samples,
        }


def derive_seed(seed: int, index: int) -> int:
    """Per-image seed, independent of processing order or parallelism."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def check_method(method: str, model: TorchAdapter) -> None:
    if method not in METHOD_NAMES:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHOD_NAMES)}")
    regressor = model.output_kind == "scalar_regressor"
    if regressor and method in CLASSIFIER_ONLY:
        raise ValueError(f"{method} needs a classifier checkpoint; use regression-iba:{{mse,rm,dv}} for regressors")
    if not regressor and method.startswith("regression-iba"):
        raise ValueError(f"{method} needs a regressor checkpoint")


def feature_statistics(
    model: TorchAdapter,
    layers: Sequence[str],
    images: np.ndarray,
    settings: AttributionSettings,
) -> dict[str, FeatureStatistics]:
    """Statistics for each layer from the first ``stats_samples`` images."""
    batch = np.asarray(images)[: settings.stats_samples]
    return {
        layer: estimate_feature_statistics(model, layer, batch, settings.bottleneck.std_floor) for layer in layers
    }


def attribute(
    model: TorchAdapter,
    image: np.ndarray,
    method: str,
    settings: AttributionSettings,
    stats: Mapping[str, FeatureStatistics] | None = None,
    target=None,
    seed: int = 0,
) -> AttributionMap:
    """Run ``method`` on one image; ``seed`` drives all randomness of the call."""
    check_method(method, model)
    if model.output_kind == "multilabel_classifier" and target is None:
        raise ValueError("a target class is required for classifier checkpoints")
    needed = settings.layers_for(method)
    missing = [layer for layer in needed if stats is None or layer not in stats]
    if missing:
        raise ValueError(f"feature statistics missing for layer(s) {missing}")
    cfg = replace(settings.bottleneck, seed=int(seed))

    if method == "iba":
        return iba_attribute(model, image, target, settings.layer, stats[settings.layer], cfg)
    if method == "inverse-iba":
        return inverse_iba_attribute(model, image, target, settings.layer, stats[settings.layer], cfg)
    if method.startswith("regression-iba:"):
        kind = method.split(":", 1)[1]
        return regression_iba_attribute(
            model, image, settings.layer, stats[settings.layer], cfg, kind,
            settings.target_value if kind == "mse" else None,
        )
    if method == "multilayer-iba":
        return multilayer_iba(model, image, target, list(settings.layers), stats, cfg, settings.threshold_policy)
    if method == "gradient":
        return baseline_attribution(model, image, target, "gradient")
    if method == "integrated-gradients":
        return baseline_attribution(model, image, target, "integrated_gradients", steps=settings.ig_steps)
    if method == "occlusion":
        return baseline_attribution(
            model, image, target, "occlusion", window=settings.occlusion_window, stride=settings.occlusion_stride
        )
    return baseline_attribution(model, image, target, "random", seed=int(seed))
