"""Model and training configuration, plus the flat ``key = value`` file format.

A config file is plain text, one ``key = value`` per line, ``#`` starts a
comment.  Keys are the field names of :class:`ModelConfig` and
:class:`TrainConfig` (they do not overlap), so a single file carries a
whole run.  Site sets are written as comma lists, or ``default`` / ``all`` / ``none``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


SITE_KINDS = ("enc.self", "dec.self", "dec.cross")


def site_id(stack: str, layer: int, kind: str) -> str:
    return f"{stack}.{layer}.{kind}"


def parse_site(site: str) -> tuple[str, int, str]:
    parts = site.split(".")
    if len(parts) != 3 or parts[0] not in ("enc", "dec") or not parts[1].lstrip("-").isdigit():
        raise ConfigError(f"bad site id {site!r}; expected e.g. 'enc.1.self' or 'dec.0.cross'")
    stack, layer, kind = parts[0], int(parts[1]), parts[2]
    if f"{stack}.{kind}" not in SITE_KINDS:
        raise ConfigError(f"bad site kind in {site!r}")
    return stack, layer, kind


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    d_m: Optional[int] = None  # None -> d
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    attention_dropout: float = 0.0
    activation_dropout: float = 0.0
    dhicm_dropout: float = 0.1
    label_smoothing: float = 0.1
    lam: float = 0.1
    dhicm_placement: tuple = ("default",)
    vocab_size: int = 64
    max_len: int = 32
    seed: int = 0
    dtype: str = "float64"
    norm_first: bool = True

    def __post_init__(self):
        if self.d_m is None:
            self.d_m = self.d
        self.dhicm_placement = tuple(self.resolve_placement(self.dhicm_placement))

    @property
    def d_k(self) -> int:
        return self.d // self.heads

    def all_sites(self) -> list[str]:
        sites = [site_id("enc", i, "self") for i in range(self.enc_layers)]
        for i in range(self.dec_layers):
            sites += [site_id("dec", i, "self"), site_id("dec", i, "cross")]
        return sites

    def default_sites(self) -> list[str]:
        out = []
        if self.enc_layers:
            out.append(site_id("enc", self.enc_layers - 1, "self"))
        if self.dec_layers:
            out += [site_id("dec", self.dec_layers - 1, "self"), site_id("dec", self.dec_layers - 1, "cross")]
        return out

    def resolve_placement(self, placement: Iterable[str]) -> list[str]:
        resolved: list[str] = []
        for item in placement:
            if item == "default":
                resolved += self.default_sites()
            elif item == "all":
                resolved += self.all_sites()
            elif item in ("none", ""):
                continue
            else:
                stack, layer, kind = parse_site(item)
                n = self.enc_layers if stack == "enc" else self.dec_layers
                if layer < 0:
                    layer += n
                resolved.append(site_id(stack, layer, kind))
        order = {s: i for i, s in enumerate(self.all_sites())}
        for s in resolved:
            if s not in order:
                raise ConfigError(f"DHICM site {s!r} does not exist in this architecture")
        return sorted(set(resolved), key=order.__getitem__)

    def validate(self) -> "ModelConfig":
        if self.d <= 0 or self.heads <= 0 or self.d_m <= 0:
            raise ConfigError("d, heads and d_m must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        for name in ("dropout", "attention_dropout", "activation_dropout", "dhicm_dropout", "label_smoothing"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name}={p} must lie in [0, 1)")
        if self.lam < 0:
            raise ConfigError(f"lam={self.lam} must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must exceed the 4 reserved ids")
        return self


@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup: Optional[int] = None  # None -> 400 at desk scale, 4000 once max_steps >= 20000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    clip_norm: float = 1.0
    max_tokens: int = 1024
    max_epochs: int = 30
    max_steps: int = 0  # 0 -> unlimited
    patience: int = 10
    log_bleu: bool = False

    def resolved_warmup(self) -> int:
        if self.warmup is not None:
            return self.warmup
        return 4000 if self.max_steps >= 20000 else 400


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _coerce(cls, key: str, raw: str):
    ftype = {f.name: f.type for f in fields(cls)}[key]
    raw = raw.strip()
    if key == "dhicm_placement":
        return tuple(s.strip() for s in raw.split(",") if s.strip()) or ("none",)
    if "bool" in str(ftype):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if raw.lower() == "none" and "Optional" in str(ftype):
        return None
    try:
        if "int" in str(ftype):
            return int(raw)
        if "float" in str(ftype):
            return float(raw)
    except ValueError as err:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from err
    return raw


def parse_pairs(pairs: Iterable[str]) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(pairs, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_configs(values: dict[str, str], base: Optional[tuple[ModelConfig, TrainConfig]] = None):
    mkw = dataclasses.asdict(base[0]) if base else {}
    tkw = dataclasses.asdict(base[1]) if base else {}
    for k, v in values.items():
        if k in _MODEL_KEYS:
            mkw[k] = _coerce(ModelConfig, k, v)
        elif k in _TRAIN_KEYS:
            tkw[k] = _coerce(TrainConfig, k, v)
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return ModelConfig(**mkw).validate(), TrainConfig(**tkw)


def load_config(path=None, overrides: Iterable[str] = ()) -> tuple[ModelConfig, TrainConfig]:
    values = parse_pairs(Path(path).read_text().splitlines()) if path else {}
    values.update(parse_pairs(overrides))
    return build_configs(values)


def dump_config(model: ModelConfig, train: Optional[TrainConfig] = None) -> str:
    lines = []
    for obj in (model, train):
        if obj is None:
            continue
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(v) if v else "none"
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def derive_seed(seed: int, *labels) -> int:
    """Subsystem seed from a root seed and a label path (stable across runs)."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(l) for l in labels)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def derive_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
