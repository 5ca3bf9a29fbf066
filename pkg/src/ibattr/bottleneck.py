"""Information bottleneck attribution: IBA, Inverse IBA, Regression IBA, Multi-layer IBA.

A bottleneck at a hidden layer replaces the activations ``F`` by

    Z = lam * F + (1 - lam) * eps,    eps ~ N(mean_F, std_F**2)

with a per-element mask ``lam = sigmoid(logits)``. The information passed
through each element is bounded by the closed-form Gaussian KL between
``P(Z|F)`` and the marginal ``N(mean_F, std_F**2)``; the mask is fitted by
gradient descent and that KL, summed over channels and converted to bits,
is the attribution map.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .adapter import TorchAdapter, as_batch
from .maps import AttributionMap, ThresholdPolicy

FitLoss = Callable[[torch.Tensor], torch.Tensor]

PRESERVE = "preserve"
DELETE = "delete"


@dataclass(frozen=True)
class FeatureStatistics:
    """Per-element population mean and std of one layer's activations."""

    mean: torch.Tensor
    std: torch.Tensor
    sample_count: int
    layer: str | None = None

    def __post_init__(self) -> None:
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean {tuple(self.mean.shape)} and std {tuple(self.std.shape)} differ in shape")
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.std).all()):
            raise ValueError("feature statistics must be finite")
        if (self.std <= 0).any():
            raise ValueError("std must be strictly positive")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.mean.shape)

    def to(self, dtype: torch.dtype) -> "FeatureStatistics":
        return replace(self, mean=self.mean.to(dtype), std=self.std.to(dtype))

    def sample_noise(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Draw ``n`` elementwise samples of N(mean, std**2)."""
        eps = torch.randn((n, *self.shape), generator=generator, dtype=self.mean.dtype)
        return self.mean + self.std * eps


@dataclass
class MaskParameters:
    """Unconstrained mask logits; ``lam = sigmoid(logits)`` lies in (0, 1)."""

    logits: torch.Tensor

    @property
    def lam(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @classmethod
    def full(cls, shape: Sequence[int], value: float, dtype=torch.float32) -> "MaskParameters":
        return cls(torch.full(tuple(shape), float(value), dtype=dtype))


@dataclass(frozen=True)
class BottleneckConfig:
    """Optimization settings for one attribution call.

    ``initial_logit=None`` picks the game's default: +5 (keep everything)
    for the preservation game, 0 for the deletion game.
    """

    beta: float = 10.0
    steps: int = 10
    learning_rate: float = 1.0
    noise_samples_per_step: int = 10
    initial_logit: float | None = None
    std_floor: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.noise_samples_per_step < 1:
            raise ValueError("noise_samples_per_step must be >= 1")
        if not self.std_floor > 0:
            raise ValueError("std_floor must be positive")

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "noise_samples_per_step": self.noise_samples_per_step,
            "initial_logit": self.initial_logit,
            "std_floor": self.std_floor,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


@torch.no_grad()
def estimate_feature_statistics(
    model: TorchAdapter,
    layer: str,
    images,
    std_floor: float = 0.01,
    batch_size: int = 64,
) -> FeatureStatistics:
    """Population mean/std of ``layer`` activations over a batch of images.

    The std is clamped from below at ``std_floor``.
    """
    batch = as_batch(images, model.dtype)
    if batch.shape[0] == 0:
        raise ValueError("cannot estimate feature statistics from an empty batch")
    if not std_floor > 0:
        raise ValueError("std_floor must be positive")
    model.eval()
    total = None
    total_sq = None
    for start in range(0, batch.shape[0], batch_size):
        acts = model.features_at(layer, batch[start : start + batch_size]).to(torch.float64)
        if not torch.isfinite(acts).all():
            raise ValueError(f"non-finite activations at layer {layer!r}")
        s, s2 = acts.sum(0), (acts * acts).sum(0)
        total = s if total is None else total + s
        total_sq = s2 if total_sq is None else total_sq + s2
    n = batch.shape[0]
    mean = total / n
    var = (total_sq / n - mean * mean).clamp_min(0.0)
    std = var.sqrt().clamp_min(std_floor)
    return FeatureStatistics(mean.to(model.dtype), std.to(model.dtype), n, layer)


def _check_shapes(features: torch.Tensor, mask: MaskParameters, stats: FeatureStatistics) -> None:
    shape = stats.shape
    if tuple(mask.logits.shape) != shape or tuple(features.shape[-len(shape) :]) != shape:
        raise ValueError(
            f"shape mismatch: features {tuple(features.shape)}, mask {tuple(mask.logits.shape)}, stats {shape}"
        )
    if not torch.isfinite(features).all():
        raise ValueError("features must be finite")


def inject_bottleneck(
    features: torch.Tensor, mask: MaskParameters, stats: FeatureStatistics, noise: torch.Tensor
) -> torch.Tensor:
    """``Z = lam * F + (1 - lam) * noise``; ``noise`` is a draw from ``stats`` (see
    :meth:`FeatureStatistics.sample_noise`) and may carry leading sample axes."""
    _check_shapes(features, mask, stats)
    if tuple(noise.shape[-features.dim() :]) != tuple(features.shape):
        raise ValueError("noise must match the feature shape")
    lam = mask.lam
    return lam * features + (1 - lam) * noise


def inject_inverse_bottleneck(
    features: torch.Tensor, mask: MaskParameters, stats: FeatureStatistics, noise: torch.Tensor
) -> torch.Tensor:
    """``Z_inv = lam * noise + (1 - lam) * F``: the mask selects what is removed."""
    _check_shapes(features, mask, stats)
    if tuple(noise.shape[-features.dim() :]) != tuple(features.shape):
        raise ValueError("noise must match the feature shape")
    lam = mask.lam
    return lam * noise + (1 - lam) * features


def kl_capacity(features: torch.Tensor, logits: torch.Tensor, stats: FeatureStatistics) -> torch.Tensor:
    """Per-element KL(N(lam F + (1-lam) mu, (1-lam)^2 sigma^2) || N(mu, sigma^2)) in nats.

    Evaluated in standardized units r = (F - mu) / sigma. ``-log(1 - lam)`` is
    ``softplus(logits)``, which stays finite for large logits. Clamped at 0
    against cancellation when lam is tiny.
    """
    lam = torch.sigmoid(logits)
    r = (features - stats.mean) / stats.std
    return (F.softplus(logits) + 0.5 * ((1 - lam) ** 2 + (lam * r) ** 2) - 0.5).clamp_min(0.0)


def kl_information_loss(
    features: torch.Tensor, mask: MaskParameters, stats: FeatureStatistics
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(mean KL, per-element KL)``; the per-element tensor is the capacity map."""
    _check_shapes(features, mask, stats)
    if not torch.isfinite(mask.logits).all():
        raise ValueError("mask logits must be finite (lam == 1 gives an infinite KL)")
    capacity = kl_capacity(features, mask.logits, stats)
    return capacity.mean(), capacity


def capacity_to_saliency(
    per_element_kl: torch.Tensor | np.ndarray,
    target_shape: tuple[int, int],
    method: str = "iba",
    meta: dict | None = None,
) -> AttributionMap:
    """Sum capacity over channels, convert nats to bits and upsample bilinearly."""
    kl = torch.as_tensor(per_element_kl).detach().to(torch.float64)
    if kl.dim() == 2:
        kl = kl[None]
    if kl.dim() != 3:
        raise ValueError("per-element KL must be shaped C×H×W")
    if (kl < 0).any():
        raise ValueError("per-element KL must be non-negative")
    h, w = target_shape
    if h <= 0 or w <= 0:
        raise ValueError("target shape must be non-empty")
    bits = kl.sum(0) / math.log(2.0)
    if tuple(bits.shape) != (h, w):
        bits = F.interpolate(bits[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    values = bits.clamp_min(0.0).numpy()
    return AttributionMap(values, units="bits_per_pixel", method=method, meta=dict(meta or {}))


# ---------------------------------------------------------------------------
# fitting terms
# ---------------------------------------------------------------------------


def classification_fit(target) -> FitLoss:
    """Binary cross-entropy of the target output(s), one value per noise sample.

    ``target`` is a class index (the class should be on) or a multi-hot
    label vector.
    """

    def fit(outputs: torch.Tensor) -> torch.Tensor:
        if np.ndim(target) == 0:
            return F.softplus(-outputs[:, int(target)])
        labels = torch.as_tensor(np.asarray(target), dtype=outputs.dtype).expand_as(outputs)
        return F.binary_cross_entropy_with_logits(outputs, labels, reduction="none").sum(1)

    return fit


def regression_fit(loss_kind: str, target_value: float | None = None, reference: float | None = None) -> FitLoss:
    """Regression fitting term on the scalar output ``phi``.

    ``mse``: (phi - target_value)^2; ``rm``: -phi^2 (score maximization);
    ``dv``: (phi - reference)^2 with ``reference`` the clean image's score.
    """
    if loss_kind == "mse":
        if target_value is None:
            raise ValueError("loss_kind='mse' requires target_value")
        return lambda out: (out[:, 0] - float(target_value)) ** 2
    if loss_kind == "rm":
        return lambda out: -out[:, 0] ** 2
    if loss_kind == "dv":
        if reference is None:
            raise ValueError("loss_kind='dv' requires the reference score")
        return lambda out: (out[:, 0] - float(reference)) ** 2
    raise ValueError(f"unknown regression loss {loss_kind!r}")


def bottleneck_objective(
    model: TorchAdapter,
    layer: str,
    features: torch.Tensor,
    stats: FeatureStatistics,
    logits: torch.Tensor,
    noise: torch.Tensor,
    fit: FitLoss,
    beta: float,
    game: str = PRESERVE,
) -> torch.Tensor:
    """Scalar objective minimized over ``logits`` for a fixed noise draw.

    preserve: beta * L_I + mean fit(forward_from(Z))
    delete:   beta * L_I - mean fit(forward_from(Z_inv))

    L_I is always computed for the standard bottleneck Z.
    """
    info = kl_capacity(features, logits, stats).mean()
    mask = MaskParameters(logits)
    if game == PRESERVE:
        z = inject_bottleneck(features, mask, stats, noise)
        return beta * info + fit(model.forward_from(layer, z)).mean()
    if game == DELETE:
        z = inject_inverse_bottleneck(features, mask, stats, noise)
        return beta * info - fit(model.forward_from(layer, z)).mean()
    raise ValueError(f"unknown game {game!r}")


def fit_mask(
    model: TorchAdapter,
    image,
    layer: str,
    stats: FeatureStatistics,
    config: BottleneckConfig,
    fit: FitLoss,
    game: str = PRESERVE,
) -> tuple[MaskParameters, torch.Tensor, list[float]]:
    """Optimize the mask for one image. Returns (mask, per-element KL, loss history).

    Only the mask logits receive gradients; model parameters are untouched.
    """
    model.eval()
    stats = stats.to(model.dtype)
    with torch.no_grad():
        features = model.features_at(layer, image)[0]
    if tuple(features.shape) != stats.shape:
        raise ValueError(f"statistics shape {stats.shape} does not match layer {layer!r} {tuple(features.shape)}")
    init = config.initial_logit
    if init is None:
        init = 5.0 if game == PRESERVE else 0.0
    logits = torch.full_like(features, float(init)).requires_grad_(True)
    optimizer = torch.optim.Adam([logits], lr=config.learning_rate)
    generator = torch.Generator().manual_seed(int(config.seed))
    history: list[float] = []
    for step in range(config.steps):
        noise = stats.sample_noise(config.noise_samples_per_step, generator)
        loss = bottleneck_objective(model, layer, features, stats, logits, noise, fit, config.beta, game)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"bottleneck objective became non-finite at step {step} (layer {layer!r})")
        (grad,) = torch.autograd.grad(loss, logits)
        optimizer.zero_grad(set_to_none=True)
        logits.grad = grad
        optimizer.step()
        history.append(float(loss.detach()))
    mask = MaskParameters(logits.detach())
    with torch.no_grad():
        capacity = kl_capacity(features, mask.logits, stats)
    return mask, capacity, history


def _require_kind(model: TorchAdapter, kind: str) -> None:
    if model.output_kind != kind:
        raise TypeError(f"this method needs a {kind} adapter, got {model.output_kind}")


def _meta(layer, config: BottleneckConfig, **extra) -> dict:
    return {"layer": layer, "beta": config.beta, "steps": config.steps, "seed": config.seed, **extra}


def _target_meta(target):
    return int(target) if np.ndim(target) == 0 else [int(v) for v in np.asarray(target)]


# ---------------------------------------------------------------------------
# attribution methods
# ---------------------------------------------------------------------------


def iba_attribute(
    model: TorchAdapter,
    image,
    target,
    layer: str,
    stats: FeatureStatistics,
    config: BottleneckConfig | None = None,
) -> AttributionMap:
    """IBA (preservation game): keep the fewest features that sustain the target."""
    config = config or BottleneckConfig()
    _require_kind(model, "multilabel_classifier")
    image = as_batch(image, model.dtype)
    _, capacity, _ = fit_mask(model, image, layer, stats, config, classification_fit(target), PRESERVE)
    return capacity_to_saliency(
        capacity, image.shape[-2:], "iba", _meta(layer, config, target=_target_meta(target))
    )


def inverse_iba_attribute(
    model: TorchAdapter,
    image,
    target,
    layer: str,
    stats: FeatureStatistics,
    config: BottleneckConfig | None = None,
) -> AttributionMap:
    """Inverse IBA (deletion game): mark every feature whose removal hurts the target."""
    config = config or BottleneckConfig()
    _require_kind(model, "multilabel_classifier")
    image = as_batch(image, model.dtype)
    _, capacity, _ = fit_mask(model, image, layer, stats, config, classification_fit(target), DELETE)
    return capacity_to_saliency(
        capacity, image.shape[-2:], "inverse_iba", _meta(layer, config, target=_target_meta(target))
    )


def regression_iba_attribute(
    model: TorchAdapter,
    image,
    layer: str,
    stats: FeatureStatistics,
    config: BottleneckConfig | None = None,
    loss_kind: str = "dv",
    target_value: float | None = None,
    inverse: bool = False,
) -> AttributionMap:
    """IBA for a scalar regressor with an ``mse``, ``rm`` or ``dv`` fitting term.

    With ``inverse=True`` the same term is maximized under the inverse mask.
    """
    config = config or BottleneckConfig()
    _require_kind(model, "scalar_regressor")
    image = as_batch(image, model.dtype)
    reference = None
    if loss_kind == "dv":
        with torch.no_grad():
            reference = float(model(image)[0, 0])
    fit = regression_fit(loss_kind, target_value, reference)
    _, capacity, _ = fit_mask(model, image, layer, stats, config, fit, DELETE if inverse else PRESERVE)
    meta = _meta(layer, config, loss_kind=loss_kind, inverse=inverse)
    if target_value is not None:
        meta["target_value"] = float(target_value)
    return capacity_to_saliency(capacity, image.shape[-2:], "regression_iba", meta)


def layerwise_iba(
    model: TorchAdapter,
    image,
    target,
    layers: Sequence[str],
    stats: Mapping[str, FeatureStatistics],
    config: BottleneckConfig | Mapping[str, BottleneckConfig] | None = None,
) -> dict[str, AttributionMap]:
    """Upsampled IBA map for each layer, each with its own statistics (and optionally config)."""
    if not layers:
        raise ValueError("at least one layer is required")
    maps = {}
    for layer in layers:
        cfg = config.get(layer, BottleneckConfig()) if isinstance(config, Mapping) else config
        maps[layer] = iba_attribute(model, image, target, layer, stats[layer], cfg)
    return maps


def intersect_maps(
    maps: Mapping[str, AttributionMap] | Sequence[AttributionMap],
    threshold_policy: ThresholdPolicy,
) -> np.ndarray:
    """Logical AND of the binarized maps."""
    items = list(maps.items()) if isinstance(maps, Mapping) else list(enumerate(maps))
    if not items:
        raise ValueError("at least one map is required")
    result = np.ones(items[0][1].shape, dtype=bool)
    for name, amap in items:
        binary = threshold_policy.binarize(amap)
        if not binary.any():
            warnings.warn(f"threshold left no pixels at layer {name!r}; multi-layer result is empty", RuntimeWarning)
            return np.zeros_like(result)
        result &= binary
    return result


def multilayer_iba(
    model: TorchAdapter,
    image,
    target,
    layers: Sequence[str],
    stats: Mapping[str, FeatureStatistics],
    config: BottleneckConfig | Mapping[str, BottleneckConfig] | None = None,
    threshold_policy: ThresholdPolicy | None = None,
) -> AttributionMap:
    """Binary map: intersection of thresholded per-layer IBA maps."""
    threshold_policy = threshold_policy or ThresholdPolicy()
    maps = layerwise_iba(model, image, target, layers, stats, config)
    binary = intersect_maps(maps, threshold_policy)
    first = config if isinstance(config, BottleneckConfig) else BottleneckConfig()
    meta = _meta(list(layers), first, target=_target_meta(target), threshold=threshold_policy.to_dict())
    return AttributionMap(binary.astype(np.float64), units="binary", method="multilayer_iba", meta=meta)
