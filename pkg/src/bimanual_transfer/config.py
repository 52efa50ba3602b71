"""Run configuration: flat ``key = value`` files with CLI overrides."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

MODES = ("pretrain", "train", "eval", "ablate", "inspect-skills")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "train"
    H: int = 12
    W: int = 12
    K: int = 18
    D: int = 64
    R: int = 4
    C: int = 6
    hidden: int = 256
    lam_skill: float = 0.0001
    lam_voxel: float = 0.001
    lam_eps: float = 1.0
    lr: float = 5e-4
    optimizer: str = "adam"
    dtype: str = "float32"
    iterations: int = 2000
    pretrain_iterations: int = 2000
    batch_size: int = 8
    demos_per_task: int = 20
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    data_seed: int = 0
    lang_seed: int = 0
    weights_head: str = "softmax"
    divergence: str = "sym_kl"
    freeze_primitives: bool = False
    use_skill_manager: bool = True
    use_visual_aligner: bool = True
    augment_copies: int = 2
    augment_rotations: list = field(default_factory=lambda: [0])
    augment_max_shift: int = 3
    eval_episodes: int = 50
    eval_seed: int = 1000
    eval_iterations: list = field(default_factory=list)
    tasks: list = field(default_factory=list)
    dataset: str = ""
    checkpoint_in: str = ""
    checkpoint_out: str = ""
    metrics_out: str = ""
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lam_skill", "lam_voxel", "lam_eps", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.iterations < 1 or self.pretrain_iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1 or self.demos_per_task < 1:
            raise ConfigError("batch_size and demos_per_task must be >= 1")
        if min(self.H, self.W, self.K, self.D, self.R, self.C) < 1:
            raise ConfigError("dimensions must be positive")
        if self.weights_head not in ("softmax", "raw"):
            raise ConfigError("weights_head must be softmax or raw")
        if self.divergence not in ("sym_kl", "true_js"):
            raise ConfigError("divergence must be sym_kl or true_js")
        if self.optimizer not in ("sgd", "adam", "lamb"):
            raise ConfigError("optimizer must be sgd, adam or lamb")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if any(r % 90 for r in self.augment_rotations):
            raise ConfigError("augment_rotations must be multiples of 90")
        if self.mode in ("train", "ablate") and not self.checkpoint_in:
            raise ConfigError(f"{self.mode} needs checkpoint_in (the unimanual checkpoint)")
        if self.mode in ("eval", "inspect-skills") and not self.checkpoint_in:
            raise ConfigError(f"{self.mode} needs checkpoint_in")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw):
    f = _FIELDS[name]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if name == "tasks":
                return items
            return [int(x) for x in items]
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for key, raw in parser["run"].items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None, mode: str | None = None) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text()))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = _coerce(k, v)
    if mode:
        values["mode"] = mode
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
