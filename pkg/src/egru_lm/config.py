"""``key = value`` run configuration with ``[model]``, ``[train]`` and ``[prune]`` sections.

Keys may also be written fully qualified (``train.lr = 0.01``) anywhere in the
file. Command-line overrides use the same qualified form and win over the file.
Every key has a default; unknown keys and unparsable values are errors that
name their line.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

SECTIONS = ("model", "train", "prune")


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    embed_dim: int = 128
    hidden_dims: tuple = (128, 128, 128)
    cell: str = "egru"
    mode: str = "event"
    dropconnect_p: float = 0.2
    dropout_p: float = 0.1
    theta_low: float = 0.0
    theta_high: float = 1.0


@dataclass
class TrainSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    wd_weights: float = 0.14
    wd_bias: float = 0.01
    bptt_len: int = 70
    batch_size: int = 20
    eval_batch_size: int = 10
    epochs: int = 20
    grad_clip_norm: float = 0.25
    seed: int = 0
    lambda_s: float = 0.3
    epsilon: float = 1.0
    keep_best: bool = True


@dataclass
class PruneSection:
    target_sparsity: float = 0.8
    n_steps: int = 4
    finetune_epochs: int = 3
    lr_scale: str = "auto"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    prune: PruneSection = field(default_factory=PruneSection)

    def lm_config(self, vocab_size):
        from .lm import LmConfig
        return LmConfig(vocab_size=vocab_size, **_as_dict(self.model))

    def train_config(self):
        from .train import TrainConfig
        return TrainConfig(**_as_dict(self.train))

    def prune_schedule(self):
        from .prune import PruneSchedule
        p = self.prune
        scale = None if p.lr_scale == "auto" else float(p.lr_scale)
        return PruneSchedule(p.target_sparsity, p.n_steps, p.finetune_epochs, scale)

    def dumps(self) -> str:
        out = []
        for sec in SECTIONS:
            out.append(f"[{sec}]")
            for f in fields(getattr(self, sec)):
                out.append(f"{f.name} = {_format(getattr(getattr(self, sec), f.name))}")
            out.append("")
        return "\n".join(out)


def _as_dict(section):
    return {f.name: getattr(section, f.name) for f in fields(section)}


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _convert(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [x for x in raw.replace("(", "").replace(")", "").split(",") if x.strip()]
        if not items:
            raise ValueError("expected a comma-separated list")
        return tuple(int(x) for x in items)
    return raw


def _assign(cfg: RunConfig, section, key, raw, where):
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown section {section!r}")
    sec = getattr(cfg, section)
    names = {f.name for f in fields(sec)}
    if key not in names:
        raise ConfigError(f"{where}: unknown key {section}.{key}")
    try:
        setattr(sec, key, _convert(raw, getattr(type(sec)(), key)))
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from None


def parse_config_text(text: str, overrides=(), source="<config>") -> RunConfig:
    cfg = RunConfig()
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{n}"
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section {section!r}")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            sec, key = key.split(".", 1)
        elif section is None:
            raise ConfigError(f"{where}: key {key!r} outside of any section")
        else:
            sec = section
        _assign(cfg, sec, key, raw, where)
    for i, ov in enumerate(overrides, start=1):
        where = f"override {i} ({ov!r})"
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"{where}: expected section.key=value")
        key, raw = ov.split("=", 1)
        sec, key = key.strip().split(".", 1)
        _assign(cfg, sec, key, raw, where)
    return cfg


def parse_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        return parse_config_text("", overrides)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), overrides, str(path))
