"""Toy convolutional classifier/regressor with hookable blocks, training loops and checkpoints."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats as sps
from sklearn.metrics import average_precision_score, roc_auc_score
from torch import nn

from .adapter import TorchAdapter, as_batch
from .maps import atomic_write

HEADS = ("multilabel_sigmoid", "scalar_linear")
CHECKPOINT_MAGIC = b"IBATTRCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ToyCnnSpec:
    input_size: tuple[int, int] = (64, 64)
    channels_per_block: tuple[int, ...] = (8, 16, 32, 32)
    n_outputs: int = 1
    head: str = "multilabel_sigmoid"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "channels_per_block", tuple(int(v) for v in self.channels_per_block))
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.channels_per_block) < 2:
            raise ValueError("at least 2 blocks are required")
        if any(c < 1 for c in self.channels_per_block) or self.n_outputs < 1:
            raise ValueError("channel counts and n_outputs must be positive")
        if self.head == "scalar_linear" and self.n_outputs != 1:
            raise ValueError("scalar_linear head has exactly one output")
        factor = 2 ** len(self.channels_per_block)
        if any(s % factor for s in self.input_size):
            raise ValueError(f"input_size {self.input_size} is not divisible by 2^{len(self.channels_per_block)}")

    def to_dict(self) -> dict:
        return asdict(self)


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


class ToyCnn(TorchAdapter):
    """conv-BN-ReLU-pool blocks ``block1..blockN``, global average pool, linear head."""

    def __init__(self, spec: ToyCnnSpec) -> None:
        chans = (1, *spec.channels_per_block)
        stages = [(f"block{i + 1}", _block(chans[i], chans[i + 1])) for i in range(len(chans) - 1)]
        head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(chans[-1], spec.n_outputs))
        kind = "multilabel_classifier" if spec.head == "multilabel_sigmoid" else "scalar_regressor"
        super().__init__(stages, head, kind)
        self.spec = spec


def build_model(spec: ToyCnnSpec) -> ToyCnn:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        return ToyCnn(spec)


def weighted_bce_loss(predictions, labels, pos_weights) -> torch.Tensor:
    """-sum_j [w_j y_j log p_j + (1 - y_j) log(1 - p_j)], averaged over the batch.

    ``predictions`` are probabilities in (0, 1).
    """
    p = torch.as_tensor(predictions, dtype=torch.float64)
    y = torch.as_tensor(labels, dtype=torch.float64)
    w = torch.as_tensor(pos_weights, dtype=torch.float64)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in shape")
    if torch.isnan(p).any() or ((p <= 0) | (p >= 1)).any():
        raise ValueError("predictions must lie strictly inside (0, 1)")
    if p.dim() == 1:
        p, y = p[None], y[None]
    per_class = -(w * y * torch.log(p) + (1 - y) * torch.log1p(-p))
    return per_class.sum(1).mean()


def _weighted_bce_logits(logits: torch.Tensor, labels: torch.Tensor, pos_weights: torch.Tensor | None) -> torch.Tensor:
    per_class = F.binary_cross_entropy_with_logits(logits, labels, pos_weight=pos_weights, reduction="none")
    return per_class.sum(1).mean()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 3e-3
    weighted_bce: bool = False
    seed: int = 0
    holdout_fraction: float = 0.2
    label_smoothing: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")


@dataclass
class TrainingReport:
    kind: str
    n_train: int
    n_holdout: int
    epoch_losses: list[float] = field(default_factory=list)
    pos_weights: list[float] | None = None
    per_class_auroc: list[float | None] | None = None
    per_class_ap: list[float | None] | None = None
    holdout_mse: float | None = None
    holdout_pcc: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the last ``fraction`` of indices are held out."""
    order = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(n * fraction))
    return np.sort(order[: n - n_hold]), np.sort(order[n - n_hold :])


def _fit(model: TorchAdapter, x: torch.Tensor, y: torch.Tensor, cfg: TrainConfig, loss_fn) -> list[float]:
    losses: list[float] = []
    if cfg.epochs == 0:
        return losses
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    model.train()
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(x.shape[0])
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                idx = torch.as_tensor(order[start : start + cfg.batch_size])
                if len(idx) < 2:  # batch norm needs two samples
                    continue
                loss = loss_fn(model(x[idx]), y[idx])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += float(loss.detach()) * len(idx)
            losses.append(total / x.shape[0])
    finally:
        model.eval()
    return losses


def _predict(model: TorchAdapter, x: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return torch.cat([model(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)]).numpy()


def _metric_or_none(fn, y, s):
    if len(np.unique(y)) < 2:
        return None
    return float(fn(y, s))


def train_classifier(model: TorchAdapter, images, labels, cfg: TrainConfig | None = None) -> tuple[TorchAdapter, TrainingReport]:
    """Train a multi-label classifier with (optionally class-weighted) BCE.

    With ``cfg.weighted_bce`` each class's positive weight is
    ``#negatives / #positives`` on the training split.
    """
    cfg = cfg or TrainConfig()
    if model.output_kind != "multilabel_classifier":
        raise TypeError("train_classifier needs a classifier head")
    x = as_batch(images, model.dtype)
    y = torch.as_tensor(np.asarray(labels), dtype=model.dtype)
    if y.dim() == 1:
        y = y[:, None]
    if y.shape[0] != x.shape[0]:
        raise ValueError("images and labels differ in length")
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("labels must be multi-hot {0, 1} vectors")
    train_idx, hold_idx = holdout_split(x.shape[0], cfg.holdout_fraction, cfg.seed)
    pos_weights = None
    if cfg.weighted_bce:
        pos = y[train_idx].sum(0)
        for j, count in enumerate(pos.tolist()):
            if count == 0:
                raise ValueError(f"class {j} has no positive training samples; its weight is undefined")
        pos_weights = (len(train_idx) - pos) / pos
    smooth = cfg.label_smoothing
    losses = _fit(
        model,
        x[train_idx],
        y[train_idx] * (1 - smooth) + smooth / 2,
        cfg,
        lambda out, t: _weighted_bce_logits(out, t, pos_weights),
    )
    scores = _predict(model, x[hold_idx])
    y_hold = y[hold_idx].numpy()
    report = TrainingReport(
        kind="classifier",
        n_train=len(train_idx),
        n_holdout=len(hold_idx),
        epoch_losses=losses,
        pos_weights=None if pos_weights is None else pos_weights.tolist(),
        per_class_auroc=[_metric_or_none(roc_auc_score, y_hold[:, j], scores[:, j]) for j in range(y.shape[1])],
        per_class_ap=[_metric_or_none(average_precision_score, y_hold[:, j], scores[:, j]) for j in range(y.shape[1])],
        config=asdict(cfg),
    )
    return model, report


def train_regressor(model: TorchAdapter, images, targets, cfg: TrainConfig | None = None) -> tuple[TorchAdapter, TrainingReport]:
    """Train a scalar regressor with mean squared error."""
    cfg = cfg or TrainConfig()
    if model.output_kind != "scalar_regressor":
        raise TypeError("train_regressor needs a scalar head")
    x = as_batch(images, model.dtype)
    y = torch.as_tensor(np.asarray(targets, dtype=np.float64), dtype=model.dtype).reshape(-1, 1)
    if y.shape[0] != x.shape[0]:
        raise ValueError("images and targets differ in length")
    train_idx, hold_idx = holdout_split(x.shape[0], cfg.holdout_fraction, cfg.seed)
    if cfg.epochs > 0:
        with torch.no_grad():
            model.head[-1].bias.fill_(float(y[train_idx].mean()))
    losses = _fit(model, x[train_idx], y[train_idx], cfg, F.mse_loss)
    pred = _predict(model, x[hold_idx])[:, 0]
    truth = y[hold_idx].numpy()[:, 0]
    pcc = None
    if len(truth) > 1 and np.std(truth) > 0 and np.std(pred) > 0:
        pcc = float(sps.pearsonr(pred, truth)[0])
    report = TrainingReport(
        kind="regressor",
        n_train=len(train_idx),
        n_holdout=len(hold_idx),
        epoch_losses=losses,
        holdout_mse=float(np.mean((pred - truth) ** 2)) if len(truth) else None,
        holdout_pcc=pcc,
        config=asdict(cfg),
    )
    return model, report


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic (8 bytes) | version (u16 LE) | header length (u32 LE) | JSON header | blobs
#
# The header holds the model spec and, per parameter/buffer, its name, dtype,
# shape and byte offset into the blob section.
# ---------------------------------------------------------------------------


def _pack(named: dict[str, np.ndarray], blobs: io.BytesIO) -> list[dict]:
    entries = []
    for name, array in named.items():
        raw = array.astype(array.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": array.dtype.str.lstrip("<>|="), "shape": list(array.shape), "offset": blobs.tell()})
        blobs.write(raw)
    return entries


def _unpack(entries: list[dict], body: memoryview) -> dict[str, np.ndarray]:
    out = {}
    for entry in entries:
        dtype = np.dtype("<" + entry["dtype"]) if entry["dtype"][0] in "fiu" else np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        out[entry["name"]] = np.frombuffer(body, dtype=dtype, count=count, offset=entry["offset"]).reshape(entry["shape"]).copy()
    return out


def save_checkpoint(path, model: ToyCnn, extra: dict | None = None, arrays: dict[str, np.ndarray] | None = None) -> Path:
    """``arrays`` holds auxiliary data kept next to the weights (e.g. the statistics batch)."""
    path = Path(path)
    blobs = io.BytesIO()
    state = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    tensors = _pack(state, blobs)
    aux = _pack({k: np.asarray(v) for k, v in (arrays or {}).items()}, blobs)
    header = json.dumps(
        {"spec": model.spec.to_dict(), "tensors": tensors, "arrays": aux, "extra": extra or {}}, sort_keys=True
    ).encode()
    with atomic_write(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(blobs.getvalue())
    return path


def _read_checkpoint(path) -> tuple[dict, memoryview]:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not an ibattr checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, length = struct.unpack_from("<HI", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<HI")
    return json.loads(data[pos : pos + length]), memoryview(data)[pos + length :]


def load_checkpoint(path) -> tuple[ToyCnn, dict]:
    """Returns the rebuilt model and the checkpoint's ``extra`` payload."""
    header, body = _read_checkpoint(path)
    model = build_model(ToyCnnSpec(**header["spec"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in _unpack(header["tensors"], body).items()})
    model.eval()
    return model, header.get("extra", {})


def load_checkpoint_arrays(path) -> dict[str, np.ndarray]:
    header, body = _read_checkpoint(path)
    return _unpack(header.get("arrays", []), body)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def snapshot_parameters(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def detector_labels(severity_grids: Sequence[np.ndarray]) -> np.ndarray:
    """3-output detector targets: any region of severity 3, any of 2, any of 0 or 1."""
    grids = [np.asarray(g) for g in severity_grids]
    return np.array(
        [[(g == 3).any(), (g == 2).any(), ((g == 0) | (g == 1)).any()] for g in grids], dtype=np.float64
    ).reshape(-1, 3)
