"""Differentiable model interface used by every attribution method.

A model is viewed as an ordered chain of named stages followed by a head.
Each stage output is a hookable layer: the bottleneck is inserted between
``features_at(layer, x)`` and ``forward_from(layer, z)``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

OUTPUT_KINDS = ("multilabel_classifier", "scalar_regressor")


def as_batch(images: np.ndarray | torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Convert H×W, N×H×W or N×1×H×W input to an N×1×H×W tensor."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images, dtype=dtype)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4:
        raise ValueError(f"cannot interpret input of shape {tuple(x.shape)} as an image batch")
    return x


class TorchAdapter(nn.Module):
    """ModelAdapter over a chain of torch stages.

    Args:
        stages: ``(name, module)`` pairs applied in order; each name is a
            hookable layer.
        head: module mapping the last stage output to ``(N, n_outputs)``.
        output_kind: ``multilabel_classifier`` (head returns logits) or
            ``scalar_regressor`` (head returns the raw score).
    """

    reentrant = True

    def __init__(
        self,
        stages: Sequence[tuple[str, nn.Module]],
        head: nn.Module,
        output_kind: str,
    ) -> None:
        super().__init__()
        if output_kind not in OUTPUT_KINDS:
            raise ValueError(f"unknown output_kind {output_kind!r}")
        if not stages:
            raise ValueError("at least one stage is required")
        self.stages = nn.ModuleDict(dict(stages))
        self.head = head
        self.output_kind = output_kind
        self.eval()

    @property
    def layers(self) -> list[str]:
        return list(self.stages.keys())

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.float32

    def _index(self, layer: str) -> int:
        try:
            return self.layers.index(layer)
        except ValueError:
            raise KeyError(f"unknown layer {layer!r}; hookable layers are {self.layers}") from None

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = as_batch(images, self.dtype)
        for stage in self.stages.values():
            x = stage(x)
        return self.head(x)

    def features_at(self, layer: str, images: torch.Tensor) -> torch.Tensor:
        stop = self._index(layer)
        x = as_batch(images, self.dtype)
        for i, stage in enumerate(self.stages.values()):
            x = stage(x)
            if i == stop:
                return x
        raise AssertionError("unreachable")

    def forward_from(self, layer: str, activations: torch.Tensor) -> torch.Tensor:
        start = self._index(layer)
        x = activations
        for stage in list(self.stages.values())[start + 1 :]:
            x = stage(x)
        return self.head(x)

    def score(self, images, target=None) -> torch.Tensor:
        """Per-image scalar used by the perturbation metrics.

        Target-class probability for classifiers (``target`` an index, or a
        label vector whose positive entries are averaged); raw output for
        regressors.
        """
        out = self.forward(images)
        return select_output(out, self.output_kind, target, probability=True)

    def layer_shape(self, layer: str, image_shape: tuple[int, int]) -> tuple[int, ...]:
        with torch.no_grad():
            probe = torch.zeros((1, 1, *image_shape), dtype=self.dtype)
            return tuple(self.features_at(layer, probe).shape[1:])


def select_output(outputs: torch.Tensor, output_kind: str, target=None, probability: bool = False) -> torch.Tensor:
    if output_kind == "scalar_regressor":
        return outputs.reshape(outputs.shape[0], -1)[:, 0]
    if target is None:
        raise ValueError("a target class is required for classifier outputs")
    values = torch.sigmoid(outputs) if probability else outputs
    if np.ndim(target) == 0:
        return values[:, int(target)]
    labels = torch.as_tensor(np.asarray(target), dtype=torch.bool)
    if labels.numel() != outputs.shape[1] or not labels.any():
        raise ValueError("label-vector target must match n_outputs and contain a positive")
    return values[:, labels].mean(dim=1)


def linear_adapter(weights: np.ndarray, bias: float = 0.0, dtype=torch.float64) -> TorchAdapter:
    """Scalar regressor ``f(x) = w·x + b`` over an H×W image; the input itself is the only layer."""
    weights = np.asarray(weights, dtype=np.float64)
    lin = nn.Linear(weights.size, 1)
    with torch.no_grad():
        lin.weight.copy_(torch.as_tensor(weights.reshape(1, -1)))
        lin.bias.fill_(bias)
    model = TorchAdapter([("input", nn.Identity())], nn.Sequential(nn.Flatten(), lin), "scalar_regressor")
    return model.to(dtype)
