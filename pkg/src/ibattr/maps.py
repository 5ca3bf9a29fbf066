"""Attribution maps, thresholding and on-disk serialization."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

UNITS = ("bits_per_pixel", "binary", "unitless")
METHODS = (
    "iba",
    "inverse_iba",
    "regression_iba",
    "multilayer_iba",
    "gradient",
    "integrated_gradients",
    "occlusion",
    "random",
)


@dataclass
class AttributionMap:
    """Per-pixel importance over an input image.

    ``meta`` carries provenance (layer(s), beta, steps, seed, ...) and is
    written verbatim into the JSON sidecar.
    """

    values: np.ndarray
    units: str
    method: str
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"attribution values must be 2-D, got shape {self.values.shape}")
        if self.units not in UNITS:
            raise ValueError(f"unknown units {self.units!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution values must be finite")
        if self.units == "bits_per_pixel" and np.any(self.values < 0):
            raise ValueError("bits_per_pixel maps must be non-negative")
        if self.units == "binary" and not np.all(np.isin(self.values, (0.0, 1.0))):
            raise ValueError("binary maps must only contain 0 and 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def sidecar(self) -> dict[str, Any]:
        return {"method": self.method, "units": self.units, "shape": list(self.shape), **self.meta}

    def save(self, stem: str | os.PathLike) -> tuple[Path, Path]:
        """Write ``<stem>.npy`` (float64 array) and ``<stem>.json`` atomically."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        npy_path = stem.with_suffix(".npy")
        json_path = stem.with_suffix(".json")
        with atomic_write(npy_path, "wb") as fh:
            np.save(fh, self.values, allow_pickle=False)
        with atomic_write(json_path, "w") as fh:
            fh.write(dumps_json(self.sidecar()))
        return npy_path, json_path

    @classmethod
    def load(cls, stem: str | os.PathLike) -> "AttributionMap":
        stem = Path(stem)
        values = np.load(stem.with_suffix(".npy"), allow_pickle=False)
        meta = json.loads(stem.with_suffix(".json").read_text())
        method = meta.pop("method")
        units = meta.pop("units")
        meta.pop("shape", None)
        return cls(values, units=units, method=method, meta=meta)


@dataclass(frozen=True)
class ThresholdPolicy:
    """How a real-valued map is binarized.

    kinds:
      ``percentile``  keep values >= the q-th percentile of the nonzero support
      ``mean_std``    keep values >= mean + k * std
      ``absolute``    keep values >= a fixed level
    """

    kind: str = "percentile"
    value: float = 70.0

    def __post_init__(self) -> None:
        if self.kind not in ("percentile", "mean_std", "absolute"):
            raise ValueError(f"unknown threshold kind {self.kind!r}")
        if self.kind == "percentile" and not 0.0 <= self.value <= 100.0:
            raise ValueError("percentile must lie in [0, 100]")

    @classmethod
    def parse(cls, text: str) -> "ThresholdPolicy":
        """Parse ``percentile:95``, ``mean_std:1.0`` or ``absolute:0.5``."""
        kind, _, value = text.partition(":")
        return cls(kind.strip(), float(value) if value else 70.0)

    def level(self, values: np.ndarray) -> float:
        values = np.asarray(values, dtype=np.float64)
        if self.kind == "absolute":
            return float(self.value)
        if self.kind == "mean_std":
            return float(values.mean() + self.value * values.std())
        support = values[values > 0]
        if support.size == 0:
            return np.inf
        return float(np.percentile(support, self.value))

    def binarize(self, values: np.ndarray | AttributionMap) -> np.ndarray:
        if isinstance(values, AttributionMap):
            values = values.values
        values = np.asarray(values, dtype=np.float64)
        mask = values >= self.level(values)
        if self.kind == "percentile":
            mask &= values > 0
        return mask

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "value": self.value}


def dumps_json(payload: Any) -> str:
    """Stable JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n"


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if np.isfinite(value) else None
    return obj


class atomic_write:
    """Context manager writing to a temp file, renamed into place on success."""

    def __init__(self, path: str | os.PathLike, mode: str = "w") -> None:
        self.path = Path(path)
        self.mode = mode

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(dir=self.path.parent, prefix=f".{self.path.name}.")
        self._fh = os.fdopen(fd, self.mode)
        return self._fh

    def __exit__(self, exc_type, exc, tb) -> None:
        self._fh.close()
        if exc_type is None:
            os.replace(self._tmp, self.path)
        else:
            os.unlink(self._tmp)
