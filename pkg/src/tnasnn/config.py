"""Experiment configuration: INI-style files with sections, plus key=value overrides."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError
from .snn import CIFARNET

# logit-matching weight per dataset for co-training; distillation uses KD_ALPHA
TABLE_ALPHA = {"cifar10": 1e-3, "cifar100": 1e-3, "fashion_mnist": 1e-4, "cifar10_dvs": 1e-4}
KD_ALPHA = 1e-5
SWEEP_ALPHAS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)

SECTIONS = {
    "experiment": ("dataset", "mode", "n_networks", "epochs", "batch_size", "out_dir", "data_root",
                   "train_limit", "test_limit", "val_fraction", "augment", "record_wall_time",
                   "teacher_checkpoint"),
    "model": ("arch", "timesteps", "dropout_p", "lif_alpha", "lif_theta", "surrogate_width"),
    "optimizer": ("initial_lr", "gamma"),
    "tna": ("alpha_match", "match_target"),
    "ternary": ("ternary", "ternary_delta", "ternary_start_epoch", "ternary_mode"),
    "seeds": ("seed_base", "seed_twin", "seed_data"),
}


@dataclass
class TrainConfig:
    dataset: str = "cifar10"
    arch: str = CIFARNET
    timesteps: int = 5
    epochs: int = 250
    batch_size: int = 256
    initial_lr: float = 0.01
    gamma: float = 0.928
    alpha_match: float | None = None
    mode: str = "tna"
    n_networks: int | None = None
    match_target: str = "per_timestep_sum"
    ternary: bool = False
    ternary_delta: float = 0.1
    ternary_start_epoch: int = 150
    ternary_mode: str = "ternary"
    seed_base: int = 0
    seed_twin: int = 1
    seed_data: int = 0
    dropout_p: float = 0.2
    lif_alpha: float = 0.5
    lif_theta: float = 1.0
    surrogate_width: float = 0.5
    out_dir: str = "runs/default"
    data_root: str = ""
    train_limit: int = 0
    test_limit: int = 0
    val_fraction: float = 0.1
    augment: bool = True
    record_wall_time: bool = False
    teacher_checkpoint: str = ""

    def resolved_alpha(self) -> float:
        if self.alpha_match is not None:
            return self.alpha_match
        if self.mode in ("kd", "kd_ce"):
            return KD_ALPHA
        return TABLE_ALPHA.get(self.dataset, 1e-3)

    def resolved_n_networks(self) -> int:
        if self.n_networks is not None:
            return self.n_networks
        return 2 if self.mode == "tna" else 1

    def validate(self) -> "TrainConfig":
        problems = []
        if self.mode not in ("baseline", "tna", "kd", "kd_ce"):
            problems.append(f"mode: unknown value {self.mode!r}")
        n = self.resolved_n_networks()
        if self.mode == "baseline" and n != 1:
            problems.append(f"n_networks: mode=baseline requires 1, got {n}")
        if self.mode == "tna" and n < 2:
            problems.append(f"n_networks: mode=tna requires at least 2, got {n}")
        if self.mode in ("kd", "kd_ce") and n != 1:
            problems.append(f"n_networks: mode={self.mode} trains one student, got {n}")
        for name in ("timesteps", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.initial_lr <= 0:
            problems.append("initial_lr: must be positive")
        if not 0 < self.gamma <= 1:
            problems.append("gamma: must lie in (0, 1]")
        if self.alpha_match is not None and self.alpha_match < 0:
            problems.append("alpha_match: must be >= 0")
        if self.match_target not in ("per_timestep_sum", "summed_logits"):
            problems.append(f"match_target: unknown value {self.match_target!r}")
        if self.ternary_mode not in ("ternary", "binary_sign"):
            problems.append(f"ternary_mode: unknown value {self.ternary_mode!r}")
        if self.ternary and self.ternary_mode == "ternary" and self.ternary_delta <= 0:
            problems.append("ternary_delta: must be positive")
        if not 0 <= self.dropout_p < 1:
            problems.append("dropout_p: must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            problems.append("val_fraction: must lie in (0, 1)")
        if problems:
            raise ConfigurationError("invalid configuration: " + "; ".join(problems))
        return self

    def digest(self) -> bytes:
        return hashlib.sha256(snapshot_text(self).encode()).digest()


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _convert(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigurationError(f"unknown configuration key {name!r}")
    kind = str(_FIELDS[name].type)
    text = raw.strip()
    try:
        if "None" in kind and text.lower() in ("", "none", "auto"):
            return None
        if kind.startswith("bool"):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return text


def parse_overrides(pairs) -> dict:
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigurationError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        key = key.strip().split(".")[-1]
        values[key] = _convert(key, value)
    return values


def load_config(path=None, overrides=None, **flags) -> TrainConfig:
    """Build a config from an optional file, ``key=value`` overrides and explicit flags.

    Later sources win: file < overrides < flags (flags set to None are ignored).
    """
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                values[key] = _convert(key, raw)
    values.update(parse_overrides(overrides))
    values.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig(**values).validate()


def snapshot_text(cfg: TrainConfig) -> str:
    """Render the config as a sectioned file that :func:`load_config` reads back."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            if value is None:
                value = "auto"
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def write_snapshot(cfg: TrainConfig, path) -> None:
    Path(path).write_text(snapshot_text(cfg))


def with_changes(cfg: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(cfg, **changes).validate()

