"""Experiment configuration: JSON in, validated dataclasses out, content-hash fingerprint.

Per-component seeds come from the master seed by hashing::

    derive_seed(master, name) = first 8 bytes (little endian) of
        sha256(f"{master}/{name}") masked to 63 bits

so paired runs that share a master seed share every stream not being ablated.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from . import lang as L
from .errors import ConfigError
from .search import SearchConfig, TrainSchedule
from .supernet import PLANS

PROFILES = ("easy", "distract", "occlude", "mixed")


def derive_seed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(master)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass
class DataConfig:
    train_profile: str = "mixed"
    n_train: int = 60
    n_val: int = 20
    val_profile: str = "mixed"
    eval_benchmarks: list = field(default_factory=lambda: ["distract"])
    n_eval: int = 20
    eval_seed: int = 7
    calib_batches: int = 4


@dataclass
class ExperimentConfig:
    seed: int = 0
    plan: str = "desk"
    lang_missing_fraction: float = 0.5
    fallback: str = L.ZERO
    use_modamixer: bool = True
    selector_activation: str = "none"
    # "supernet": the retrained subnet starts from its supernet weights; "scratch": from the initial weights
    retrain_init: str = "supernet"
    data: DataConfig = field(default_factory=DataConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    retrain: TrainSchedule = field(default_factory=lambda: TrainSchedule(iters=500, lr=0.01))
    output_dir: str = "runs/default"

    # -- validation -----------------------------------------------------------
    def validate(self):
        if self.plan not in PLANS:
            raise ConfigError(f"unknown plan {self.plan!r}; choose from {sorted(PLANS)}")
        if not 0.0 <= self.lang_missing_fraction <= 1.0:
            raise ConfigError("lang_missing_fraction must lie in [0, 1]")
        if self.fallback not in L.FALLBACK_MODES:
            raise ConfigError(f"fallback must be one of {L.FALLBACK_MODES}")
        if self.selector_activation not in ("none", "sigmoid"):
            raise ConfigError("selector_activation must be 'none' or 'sigmoid'")
        if self.retrain_init not in ("supernet", "scratch"):
            raise ConfigError("retrain_init must be 'supernet' or 'scratch'")
        d = self.data
        for p in [d.train_profile, d.val_profile] + list(d.eval_benchmarks):
            if p not in PROFILES:
                raise ConfigError(f"unknown data profile {p!r}")
        if min(d.n_train, d.n_val, d.n_eval) < 1 or d.calib_batches < 0:
            raise ConfigError("data sizes must be positive")
        self.search.validate()
        self.train.validate()
        self.retrain.validate()
        if self.search.supernet_iters != self.train.iters:
            raise ConfigError("search.supernet_iters and train.iters must agree")
        return self

    # -- serialization ----------------------------------------------------------
    def to_dict(self):
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        for name, sub in (("data", DataConfig), ("search", SearchConfig), ("train", TrainSchedule), ("retrain", TrainSchedule)):
            if name in d:
                kw[name] = _build(sub, d.pop(name), name)
        top = _build(cls, d, "config", allow_nested=True)
        for k, v in kw.items():
            setattr(top, k, v)
        if "train" in kw and "search" not in kw:
            top.search.supernet_iters = top.train.iters
        return top.validate()

    @classmethod
    def loads(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.loads(f.read())

    def fingerprint(self) -> str:
        """sha256 of the canonical JSON, ignoring where outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def seed_for(self, component: str) -> int:
        return derive_seed(self.seed, component)


_NESTED = {"data", "search", "train", "retrain"}


def _build(cls, d, where, allow_nested=False):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    defaults = cls()
    for k, v in d.items():
        if allow_nested and k in _NESTED:
            continue
        want = type(getattr(defaults, k))
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, want) or (want is int and isinstance(v, bool)):
            raise ConfigError(f"{where}.{k} should be {want.__name__}, got {type(v).__name__}")
        setattr(defaults, k, v)
    return defaults


def reference_config(seed=0, **overrides) -> ExperimentConfig:
    """Roughly 20 CPU-minutes per master seed, symmetric arm included.

    A shorter supernet phase and a smaller population than the defaults; the
    saved time goes to retraining, which decides final tracking quality. The
    winner is retrained from the initial weights: desk-scale supernet weights
    are a poor starting point, and the language pathway never recovers from them.
    """
    cfg = ExperimentConfig(
        seed=seed,
        data=DataConfig(n_val=10),
        search=SearchConfig(supernet_iters=1000, population=8, generations=4, top_k=2, crossover=3, mutation=3, fitness_budget=10),
        train=TrainSchedule(iters=1000),
        retrain=TrainSchedule(iters=1500, lr=0.05),
        retrain_init="scratch",
        output_dir=f"runs/reference-{seed}",
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


PRESETS = {"default": lambda seed=0: ExperimentConfig(seed=seed).validate(), "reference": reference_config}


def default_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()
