"""Run configuration and its ``key = value`` file format.

Example::

    [training]
    lr = 0.001
    epochs = 3
    batch_size = 25
    seed = 42

    [selection]
    tau = 0.90
    n = 10

    [architecture]
    conv2_maps = 32

    [paths]
    data = synth.eegd
"""

import configparser
from dataclasses import asdict, dataclass, field, fields, replace

from .model import Architecture


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 3
    batch_size: int = 25
    seed: int = 0
    tau: float = 0.90
    # lowest threshold tried when nothing passes tau; None disables the fallback
    tau_floor: float = None
    n_channels: int = 10
    arch: Architecture = field(default_factory=Architecture)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.5 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0.5, 1], got {self.tau}")
        if self.tau_floor is not None and not 0.5 < self.tau_floor <= self.tau:
            raise ConfigError(f"tau_floor must lie in (0.5, tau], got {self.tau_floor}")
        if self.n_channels < 1:
            raise ConfigError(f"n must be >= 1, got {self.n_channels}")

    def to_dict(self):
        d = asdict(self)
        d["arch"] = asdict(self.arch)
        return d

    def replace(self, **kw):
        return replace(self, **kw)


_TRAINING_KEYS = {"lr": float, "beta1": float, "beta2": float, "eps": float,
                  "epochs": int, "batch_size": int, "seed": int}
_SELECTION_KEYS = {"tau": float, "tau_floor": float, "n": int}


def _convert(section, key, value, typ):
    try:
        return typ(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {value!r} is not a valid {typ.__name__}") from None


def parse_config(text):
    """Parse config text into ``(TrainConfig, paths dict)``."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    known = {"training", "selection", "architecture", "paths"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kw = {}
    if cp.has_section("training"):
        for key, value in cp.items("training"):
            if key not in _TRAINING_KEYS:
                raise ConfigError(f"unknown key [training] {key}")
            kw[key] = _convert("training", key, value, _TRAINING_KEYS[key])
    if cp.has_section("selection"):
        for key, value in cp.items("selection"):
            if key not in _SELECTION_KEYS:
                raise ConfigError(f"unknown key [selection] {key}")
            v = _convert("selection", key, value, _SELECTION_KEYS[key])
            kw["n_channels" if key == "n" else key] = v
    if cp.has_section("architecture"):
        arch_fields = {f.name for f in fields(Architecture)}
        arch_kw = {}
        for key, value in cp.items("architecture"):
            if key not in arch_fields:
                raise ConfigError(f"unknown key [architecture] {key}")
            arch_kw[key] = _convert("architecture", key, value, int)
        kw["arch"] = Architecture(**arch_kw)
    paths = dict(cp.items("paths")) if cp.has_section("paths") else {}
    return TrainConfig(**kw), paths


def load_config(path):
    if path is None:
        return TrainConfig(), {}
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
