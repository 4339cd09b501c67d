"""Run configuration: a YAML file mapping one-to-one onto RunConfig.

Every command validates its config up front and reports failures with the
offending field path. The environment variable ASFSEG_SEED overrides the
run seed; the network and split seeds default to the run seed unless set
explicitly.
"""

import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError, UsageError
from .imaging import EdgeGtParams
from .losses import LossWeights
from .network import NetworkConfig
from .volume import PhantomConfig

SEED_ENV_VAR = "ASFSEG_SEED"


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("optimizer.lr", f"must be positive, got {self.lr}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"optimizer.{name}", f"must be in [0,1), got {b}")
        return self


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 300
    batch_size: int = 4
    log_interval: int = 10
    checkpoint_interval: int = 100

    def validate(self):
        if self.steps < 0:
            raise ConfigError("schedule.steps", f"must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError("schedule.batch_size", f"must be >= 1, got {self.batch_size}")
        if self.log_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("schedule.log_interval", "intervals must be >= 1")
        return self


@dataclass(frozen=True)
class SplitConfig:
    seed: int = 0
    val_fraction: float = 0.0

    def validate(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("split.val_fraction", f"must be in [0,1), got {self.val_fraction}")
        return self


@dataclass(frozen=True)
class PhantomSpec:
    count: int = 1
    phantom: PhantomConfig = PhantomConfig()

    def validate(self):
        if self.count < 0:
            raise ConfigError("phantoms.count", f"must be >= 0, got {self.count}")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "out"
    normalize: tuple = (0.0, 1.0)
    threshold: float = 0.5
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    edge_gt: EdgeGtParams = field(default_factory=EdgeGtParams)
    split: SplitConfig = field(default_factory=SplitConfig)
    phantoms: PhantomSpec = field(default_factory=PhantomSpec)

    def validate(self):
        if self.normalize[0] >= self.normalize[1]:
            raise ConfigError("normalize", f"needs lo < hi, got {self.normalize}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold", f"must be in (0,1), got {self.threshold}")
        self.network.validate()
        self.optimizer.validate()
        self.schedule.validate()
        self.split.validate()
        self.phantoms.validate()
        return self

    def to_dict(self):
        return {
            "seed": self.seed,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "normalize": {"lo": self.normalize[0], "hi": self.normalize[1]},
            "threshold": self.threshold,
            "network": self.network.to_dict(),
            "loss": self.loss.to_dict(),
            "optimizer": {"lr": self.optimizer.lr, "beta1": self.optimizer.beta1,
                          "beta2": self.optimizer.beta2, "eps": self.optimizer.eps},
            "schedule": {"steps": self.schedule.steps, "batch_size": self.schedule.batch_size,
                         "log_interval": self.schedule.log_interval,
                         "checkpoint_interval": self.schedule.checkpoint_interval},
            "edge_gt": self.edge_gt.to_dict(),
            "split": {"seed": self.split.seed, "val_fraction": self.split.val_fraction},
            "phantoms": {"count": self.phantoms.count, **self.phantoms.phantom.to_dict()},
        }


def _section(raw, key, allowed):
    d = raw.pop(key, None) or {}
    if not isinstance(d, dict):
        raise ConfigError(key, f"must be a mapping, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(key, f"unknown keys {sorted(unknown)}")
    return d


def _build(cls, section, name, **extra):
    try:
        return cls(**section, **extra)
    except (TypeError, UsageError) as e:
        raise ConfigError(name, str(e)) from None


def run_config_from_dict(raw, env=os.environ):
    raw = dict(raw or {})
    seed = int(raw.pop("seed", 0))
    if SEED_ENV_VAR in env:
        try:
            seed = int(env[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(SEED_ENV_VAR, f"must be an integer, got '{env[SEED_ENV_VAR]}'") from None

    norm = _section(raw, "normalize", ("lo", "hi"))
    net = _section(raw, "network", ("base_channels", "encoder_depth", "asf_variant", "msf_enabled",
                                    "edge_branch_enabled", "ms_outputs_enabled", "attention_reduction", "seed"))
    net.setdefault("seed", seed)
    loss = _section(raw, "loss", ("edge_bce", "edge_dice", "scale", "dice_smooth"))
    if "scale" in loss:
        loss["scale"] = tuple(loss["scale"])
    opt = _section(raw, "optimizer", ("lr", "beta1", "beta2", "eps"))
    sched = _section(raw, "schedule", ("steps", "batch_size", "log_interval", "checkpoint_interval"))
    edge = _section(raw, "edge_gt", ("sigma", "kernel", "canny_low", "canny_high", "band_threshold"))
    split = _section(raw, "split", ("seed", "val_fraction"))
    split.setdefault("seed", seed)
    ph = _section(raw, "phantoms", ("count", "dims", "nodule_count", "radius_range",
                                    "z_radius_range", "intensity", "noise_sigma"))
    count = ph.pop("count", 1)
    for key in ("dims", "radius_range", "z_radius_range"):
        if ph.get(key) is not None:
            ph[key] = tuple(ph[key])

    cfg = RunConfig(
        seed=seed,
        data_dir=str(raw.pop("data_dir", "data")),
        out_dir=str(raw.pop("out_dir", "out")),
        normalize=(float(norm.get("lo", 0.0)), float(norm.get("hi", 1.0))),
        threshold=float(raw.pop("threshold", 0.5)),
        network=_build(NetworkConfig, net, "network"),
        loss=_build(LossWeights, loss, "loss"),
        optimizer=_build(OptimizerConfig, opt, "optimizer"),
        schedule=_build(ScheduleConfig, sched, "schedule"),
        edge_gt=_build(EdgeGtParams, edge, "edge_gt"),
        split=_build(SplitConfig, split, "split"),
        phantoms=PhantomSpec(count=int(count), phantom=_build(PhantomConfig, ph, "phantoms")),
    )
    if raw:
        raise ConfigError("config", f"unknown top-level keys {sorted(raw)}")
    return cfg.validate()


def load_run_config(path, env=os.environ):
    with open(path, encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config", f"{path} must contain a mapping")
    return run_config_from_dict(raw, env=env)


def save_run_config(path, cfg):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
