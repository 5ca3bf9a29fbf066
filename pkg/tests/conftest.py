from __future__ import annotations

import numpy as np
import pytest
import torch
from torch import nn

from ibattr.adapter import TorchAdapter
from ibattr.models import ToyCnnSpec, build_model

torch.set_num_threads(1)


class ConstantStage(nn.Module):
    """Discards its input; used to build models that ignore a layer."""

    def __init__(self, shape, value: float = 0.5) -> None:
        super().__init__()
        self.register_buffer("value", torch.full(tuple(shape), value))

    def forward(self, x):
        return self.value.expand(x.shape[0], *self.value.shape)


def null_model(kind: str = "multilabel_classifier", dtype=torch.float32) -> TorchAdapter:
    """Two stages; the head sees a constant regardless of the first stage's output."""
    torch.manual_seed(0)
    stages = [
        ("conv", nn.Sequential(nn.Conv2d(1, 4, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))),
        ("const", ConstantStage((4, 8, 8))),
    ]
    n_out = 2 if kind == "multilabel_classifier" else 1
    head = nn.Sequential(nn.Flatten(), nn.Linear(4 * 8 * 8, n_out))
    return TorchAdapter(stages, head, kind).to(dtype)


@pytest.fixture
def tiny_classifier():
    return build_model(ToyCnnSpec(input_size=(16, 16), channels_per_block=(4, 8), n_outputs=2, seed=0)).double()


@pytest.fixture
def tiny_regressor():
    return build_model(
        ToyCnnSpec(input_size=(16, 16), channels_per_block=(4, 8), n_outputs=1, head="scalar_linear", seed=0)
    ).double()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, repeated in the terminal summary so the
# verdicts are visible even with output capture on
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
