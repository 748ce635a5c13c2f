"""Run configuration: one JSON file, overridable from the command line.

Precedence is flags > file > defaults. Example file::

    {
      "seed": 7,
      "sinkhorn":   {"epsilon": 0.01, "tolerance": 1e-6},
      "barycenter": {"epsilon": 0.1},
      "measure":    {"kind": "subsample", "count": 250},
      "train":      {"n_agents": 5, "rounds": 30},
      "align":      {"global_weighting": "uniform"},
      "paths":      {"input": "data/train.bin", "test_input": "data/test.bin",
                     "format": "cifar10-binary", "out": "runs/a"}
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .align import AlignConfig
from .barycenter import BarycenterConfig
from .channels import MeasureMode
from .errors import ValidationError
from .learner import TrainConfig
from .ot import SinkhornConfig

SECTIONS = ("sinkhorn", "barycenter", "measure", "train", "align", "paths")


@dataclass(frozen=True)
class Paths:
    input: Optional[str] = None
    test_input: Optional[str] = None
    format: str = "cifar10-binary"
    out: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    sinkhorn: SinkhornConfig = SinkhornConfig()
    barycenter: BarycenterConfig = BarycenterConfig()
    measure: MeasureMode = MeasureMode()
    train: TrainConfig = TrainConfig()
    global_weighting: str = "uniform"
    workers: int = 1
    paths: Paths = Paths()
    extra: Dict[str, Any] = field(default_factory=dict)

    def align_config(self) -> AlignConfig:
        return AlignConfig(
            mode=dataclasses.replace(self.measure, seed=self.seed),
            local=self.barycenter,
            global_=self.barycenter,
            sinkhorn=self.sinkhorn,
            seed=self.seed,
            global_weighting=self.global_weighting,
            workers=self.workers,
        )

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed, workers=self.workers)


def _build(cls, values: Dict[str, Any], section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as err:
        raise ValidationError(f"[{section}]: {err}") from None


def merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; ``None`` in ``override`` means "not given"."""
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict):
            merged = merge(out.get(key) or {}, value)
            if merged or key in out:
                out[key] = merged
        elif value is not None:
            out[key] = value
    return out


def from_dict(raw: Dict[str, Any]) -> RunConfig:
    unknown = set(raw) - set(SECTIONS) - {"seed", "workers"}
    if unknown:
        raise ValidationError(f"unknown top-level config keys: {sorted(unknown)}")
    align = dict(raw.get("align", {}))
    weighting = align.pop("global_weighting", "uniform")
    if align:
        raise ValidationError(f"unknown keys in [align]: {sorted(align)}")
    seed = int(raw.get("seed", 0))
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    bary = dict(raw.get("barycenter", {}))
    if "weights" in bary:
        raise ValidationError("barycenter weights are set per call; use align.global_weighting")
    cfg = RunConfig(
        seed=seed,
        sinkhorn=_build(SinkhornConfig, raw.get("sinkhorn", {}), "sinkhorn"),
        barycenter=_build(BarycenterConfig, bary, "barycenter"),
        measure=_build(MeasureMode, raw.get("measure", {}), "measure"),
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        global_weighting=weighting,
        workers=int(raw.get("workers", 1)),
        paths=_build(Paths, raw.get("paths", {}), "paths"),
    )
    cfg.align_config()  # validates weighting and workers
    return cfg


def load(path=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as err:
            raise OSError(err.errno, f"cannot read config: {err.strerror}", str(path)) from err
        except json.JSONDecodeError as err:
            raise ValidationError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be an object")
    return from_dict(merge(raw, overrides or {}))
