"""Run configuration: a strict JSON document with data/model/reservoir/train sections."""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .model import ConfigError, ModelConfig
from .reservoir import ReservoirConfig
from .train import TrainConfig

SEED_ENV = "RAMAT_SEED"


@dataclasses.dataclass(frozen=True)
class DataConfig:
    csv: tuple[str, ...] = ()
    window_ms: int = 20
    step_ms: int = 20
    n_seq: int = 8
    t_step: int = 20
    schema: str | None = None
    test_fraction: float = 0.0
    rows: int | None = None  # synthetic generator length

    def __post_init__(self):
        object.__setattr__(self, "csv", tuple(self.csv))
        if self.window_ms <= 0 or self.step_ms <= 0 or self.t_step <= 0:
            raise ConfigError("window_ms, step_ms and t_step must be positive")
        if self.n_seq < 1:
            raise ConfigError("n_seq must be >= 1")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")


def _strict(cls, section: str, doc: Mapping[str, Any] | None):
    doc = dict(doc or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {unknown}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclasses.dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    model: Mapping[str, Any] = dataclasses.field(default_factory=dict)
    reservoir: ReservoirConfig = ReservoirConfig()
    train: TrainConfig = TrainConfig()
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RunConfig":
        unknown = sorted(set(doc) - {"data", "model", "reservoir", "train", "seed"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {unknown}")
        model = dict(doc.get("model") or {})
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        bad = sorted(set(model) - names)
        if bad:
            raise ConfigError(f"unknown key(s) in 'model': {bad}")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        return cls(
            data=_strict(DataConfig, "data", doc.get("data")),
            model=model,
            reservoir=_strict(ReservoirConfig, "reservoir", doc.get("reservoir")),
            train=_strict(TrainConfig, "train", doc.get("train")),
            seed=seed,
        )

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def with_seed(self, flag: int | None = None, env: Mapping[str, str] | None = None
                  ) -> "RunConfig":
        """Seed precedence: command-line flag, then RAMAT_SEED, then the file."""
        env = os.environ if env is None else env
        if flag is not None:
            return dataclasses.replace(self, seed=int(flag))
        if env.get(SEED_ENV):
            try:
                return dataclasses.replace(self, seed=int(env[SEED_ENV]))
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer") from None
        return self

    def model_config(self, num_channels: int) -> ModelConfig:
        fields = dict(self.model)
        if fields.setdefault("num_channels", num_channels) != num_channels:
            raise ConfigError(f"model.num_channels={fields['num_channels']} but data has "
                              f"{num_channels} channels")
        try:
            return ModelConfig(**fields)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None

    def effective(self, num_channels: int | None = None) -> dict:
        """All defaults materialised, ready to echo or re-run."""
        model = (dataclasses.asdict(self.model_config(num_channels)) if num_channels
                 else {**dataclasses.asdict(ModelConfig()), **self.model})
        data = dataclasses.asdict(self.data)
        data["csv"] = list(self.data.csv)
        return {"data": data, "model": model,
                "reservoir": dataclasses.asdict(self.reservoir),
                "train": dataclasses.asdict(self.train), "seed": self.seed}

    def seeds(self) -> dict[str, np.random.Generator | int]:
        """Independent streams for reservoir, init, masking and shuffling."""
        ss = np.random.SeedSequence(self.seed)
        res, init, mask, shuffle = ss.spawn(4)
        return {
            "reservoir": int(res.generate_state(1, np.uint64)[0]),
            "init": np.random.Generator(np.random.PCG64(init)),
            "mask": np.random.Generator(np.random.PCG64(mask)),
            "shuffle": np.random.Generator(np.random.PCG64(shuffle)),
        }
