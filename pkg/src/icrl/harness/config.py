"""Experiment configuration for the synthetic pipeline runs."""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..causal import CIConfig
from ..ivae import IvaeConfig
from ..predictor import PredictorConfig
from ..semgen import EnvSpec, MixingSpec

MIXING_KINDS = ("identity", "linear", "nonlinear")
BASELINES = ("erm", "irm")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything a run depends on. Serialised as flat JSON.

    ``ivae``, ``predictor`` and ``rules`` hold keyword overrides for the
    phase configs; their seeds are always taken from the run seed.
    ``erm_hidden="auto"`` uses an affine ERM model for identity and linear
    mixing and the predictor's hidden width for nonlinear mixing.
    """

    mixing: str = "nonlinear"
    train_sigma3: list = field(default_factory=lambda: [0.2, 2.0])
    test_sigma3: float = 100.0
    sigma1: float = 1.0
    sigma2: float = 0.0
    n_per_env: int = 1000
    n_test: int | None = None
    task: str = "regression"
    seeds: int = 5
    first_seed: int = 0
    conditional_prior: bool = True
    phase2: bool = True
    baselines: list = field(default_factory=lambda: list(BASELINES))
    erm_hidden: object = "auto"
    irm_penalty_weight: float = 100.0
    irm_warmup_epochs: int = 10
    invariance_sigma3: list = field(default_factory=lambda: [10.0, 50.0, 100.0])
    ivae: dict = field(default_factory=dict)
    predictor: dict = field(default_factory=dict)
    rules: dict = field(default_factory=dict)
    out_dir: str = "runs"

    def __post_init__(self):
        self.train_sigma3 = [float(s) for s in self.train_sigma3]
        self.invariance_sigma3 = [float(s) for s in self.invariance_sigma3]
        self.test_sigma3 = float(self.test_sigma3)
        self.validate()

    def validate(self) -> None:
        if self.mixing not in MIXING_KINDS:
            raise ConfigError(f"mixing must be one of {MIXING_KINDS}, got {self.mixing!r}")
        if len(self.train_sigma3) < 2:
            raise ConfigError("need at least two training environments")
        if len(set(self.train_sigma3)) != len(self.train_sigma3):
            raise ConfigError("training environments must be distinct")
        if self.test_sigma3 in self.train_sigma3:
            raise ConfigError(f"test sigma3={self.test_sigma3} coincides with a training environment")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.seeds < 1 or self.n_per_env < 1:
            raise ConfigError("seeds and n_per_env must be positive")
        unknown = set(self.baselines) - set(BASELINES)
        if unknown:
            raise ConfigError(f"unknown baselines {sorted(unknown)}")
        if self.erm_hidden != "auto" and self.erm_hidden is not None and int(self.erm_hidden) < 1:
            raise ConfigError("erm_hidden must be 'auto', null or a positive width")
        for name, cls, banned in (("ivae", IvaeConfig, {"seed"}), ("predictor", PredictorConfig, {"seed", "task"}),
                                  ("rules", CIConfig, {"seed"})):
            allowed = {f.name for f in fields(cls)} - banned
            bad = set(getattr(self, name)) - allowed
            if bad:
                raise ConfigError(f"{name}: unknown or reserved keys {sorted(bad)}")
        try:
            self.train_envs()
            self.test_env()
            self.ivae_config(0)
            self.predictor_config(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # derived objects

    @property
    def seed_list(self) -> list[int]:
        return list(range(self.first_seed, self.first_seed + self.seeds))

    def train_envs(self) -> list[EnvSpec]:
        return [EnvSpec(self.sigma1, self.sigma2, s) for s in self.train_sigma3]

    def test_env(self) -> EnvSpec:
        return EnvSpec(self.sigma1, self.sigma2, self.test_sigma3)

    def mixing_spec(self, seed: int) -> MixingSpec:
        return MixingSpec(self.mixing, seed=seed)

    def ivae_config(self, seed: int) -> IvaeConfig:
        return IvaeConfig(**{**self.ivae, "conditional": self.conditional_prior, "seed": seed})

    def predictor_config(self, seed: int, hidden="default") -> PredictorConfig:
        kw = dict(self.predictor)
        if hidden != "default":
            kw["hidden"] = hidden
        return PredictorConfig(**kw, seed=seed, task=self.task)

    def erm_config(self, seed: int) -> PredictorConfig:
        if self.erm_hidden == "auto":
            hidden = "default" if self.mixing == "nonlinear" else None
        else:
            hidden = self.erm_hidden
        return self.predictor_config(seed, hidden)

    def rules_config(self, seed: int) -> CIConfig:
        return CIConfig(**{**self.rules, "seed": seed})

    # serialisation

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of every field that can change a result (the output directory cannot)."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys {sorted(bad)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def stream_seed(seed: int, name: str) -> int:
    """Independent integer seed for a named random stream of one run."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])
