"""Flat ``key = value`` experiment configuration.

Recognized keys::

    out, data_root, sequence, method, reference
    train.{lr,dlr,lambda_kld,epochs,batch_size,momentum,seed,init,distill}
    model.{widths,units_per_stage,decoder_width,up_kernels}
    domain.<name>.{seed,classes,hue,background,image_size,n_train,n_val,color_jitter,
                   texture_freq,texture_amp,noise,density,shape_scale}

Lists are comma separated. ``#`` starts a comment line. Every domain needs
a ``seed``; domains are declared in file order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from mdil.baselines import METHODS
from mdil.data import DomainGenSpec, validate_domain_specs
from mdil.model import DomainSpec, EncoderConfig
from mdil.trainer import FREEZE_SHARED, TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


TOP_KEYS = {"out", "data_root", "sequence", "method", "reference"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
MODEL_KEYS = {"widths", "units_per_stage", "decoder_width", "up_kernels"}
DOMAIN_KEYS = {"seed", "classes", "hue", "background", "image_size", "n_train", "n_val",
               "color_jitter", "texture_freq", "texture_amp", "noise", "density", "shape_scale"}
_NAME = re.compile(r"^[A-Za-z0-9_-]+$")

DEFAULT_CONFIG = """\
# three synthetic domains, 5 shared classes + 1 exclusive each
out = runs/default
data_root = data
sequence = A,B
method = ours
reference = single_task

train.lr = 0.05
train.dlr = 100
train.lambda_kld = 1.0
train.epochs = 10
train.batch_size = 4
train.momentum = 0.9
train.seed = 0

domain.A.seed = 11
domain.A.classes = background,rectangle,disk,triangle,ring,cross
domain.A.hue = 0.0
domain.A.background = 0.22,0.24,0.30
domain.A.texture_freq = 3.0
domain.A.texture_amp = 0.08
domain.A.noise = 0.03

domain.B.seed = 22
domain.B.classes = background,rectangle,disk,triangle,ring,stripe
domain.B.hue = 0.33
domain.B.background = 0.62,0.58,0.45
domain.B.texture_freq = 6.0
domain.B.texture_amp = 0.12
domain.B.noise = 0.05

domain.C.seed = 33
domain.C.classes = background,rectangle,disk,triangle,ring,diamond
domain.C.hue = 0.66
domain.C.background = 0.30,0.45,0.30
domain.C.texture_freq = 1.5
domain.C.texture_amp = 0.05
domain.C.noise = 0.04
"""


@dataclass
class ExperimentConfig:
    domains: list
    sequence: list
    method: str = "ours"
    reference: str = "single_task"
    out: str = "runs/default"
    data_root: str = "data"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    raw: dict = field(default_factory=dict)

    def domain(self, name: str) -> DomainGenSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise ConfigError(f"sequence names unknown domain {name!r}")

    def model_specs(self) -> list[DomainSpec]:
        return [DomainSpec(self.domain(n).name, self.domain(n).classes) for n in self.sequence]

    def echo(self) -> list[str]:
        """Effective settings, one ``key = value`` line each, sorted."""
        return [f"{k} = {v}" for k, v in sorted(self.raw.items())]


def parse_pairs(text: str, source: str = "<config>") -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _floats(key, v, n=None):
    try:
        out = tuple(float(x) for x in v.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {v!r}") from None
    if n is not None and len(out) != n:
        raise ConfigError(f"{key}: expected {n} values, got {len(out)}")
    return out


def _ints(key, v, n=None):
    try:
        out = tuple(int(x) for x in v.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected integers, got {v!r}") from None
    if n is not None and len(out) != n:
        raise ConfigError(f"{key}: expected {n} values, got {len(out)}")
    return out


def _scalar(key, v, kind):
    try:
        return kind(v)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {v!r} as {kind.__name__}") from None


_DOMAIN_PARSE = {
    "seed": lambda k, v: _scalar(k, v, int),
    "classes": lambda k, v: tuple(c.strip() for c in v.split(",")),
    "hue": lambda k, v: _scalar(k, v, float),
    "background": lambda k, v: _floats(k, v, 3),
    "image_size": lambda k, v: _scalar(k, v, int),
    "n_train": lambda k, v: _scalar(k, v, int),
    "n_val": lambda k, v: _scalar(k, v, int),
    "color_jitter": lambda k, v: _scalar(k, v, float),
    "texture_freq": lambda k, v: _scalar(k, v, float),
    "texture_amp": lambda k, v: _scalar(k, v, float),
    "noise": lambda k, v: _scalar(k, v, float),
    "density": lambda k, v: _ints(k, v, 2),
    "shape_scale": lambda k, v: _floats(k, v, 2),
}

_TRAIN_PARSE = {
    "lr": float, "lambda_kld": float, "epochs": int, "batch_size": int, "momentum": float,
    "seed": int, "init": str, "distill": str,
}


def build_config(pairs: dict) -> ExperimentConfig:
    domains: dict[str, dict] = {}
    train, model, top = {}, {}, {}
    for key, value in pairs.items():
        parts = key.split(".")
        if len(parts) == 1 and key in TOP_KEYS:
            top[key] = value
        elif parts[0] == "train" and len(parts) == 2 and parts[1] in TRAIN_KEYS:
            if parts[1] == "dlr":
                train["dlr"] = value if value == FREEZE_SHARED else _scalar(key, value, float)
            else:
                train[parts[1]] = _scalar(key, value, _TRAIN_PARSE[parts[1]])
        elif parts[0] == "model" and len(parts) == 2 and parts[1] in MODEL_KEYS:
            name = parts[1]
            if name in ("widths", "up_kernels"):
                model[name] = _ints(key, value)
            else:
                model[name] = _scalar(key, value, int)
        elif parts[0] == "domain" and len(parts) == 3 and parts[2] in DOMAIN_KEYS:
            if not _NAME.match(parts[1]):
                raise ConfigError(f"{key}: domain names may use letters, digits, '_' and '-'")
            domains.setdefault(parts[1], {})[parts[2]] = _DOMAIN_PARSE[parts[2]](key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if not domains:
        raise ConfigError("no domains declared (expected domain.<name>.seed = ...)")
    specs = []
    for name, kw in domains.items():
        if "seed" not in kw:
            raise ConfigError(f"missing required key 'domain.{name}.seed'")
        try:
            specs.append(DomainGenSpec(name=name, **kw))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    try:
        validate_domain_specs(specs)
        train_cfg = TrainConfig(**train)
        enc = EncoderConfig(**model)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    names = [s.name for s in specs]
    sequence = [s.strip() for s in top.get("sequence", ",".join(names)).split(",") if s.strip()]
    if not sequence:
        raise ConfigError("sequence is empty")
    unknown = [s for s in sequence if s not in names]
    if unknown:
        raise ConfigError(f"sequence names unknown domain {unknown[0]!r}")
    if len(set(sequence)) != len(sequence):
        raise ConfigError("sequence repeats a domain")
    method = top.get("method", "ours")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
    reference = top.get("reference", "single_task")
    if reference not in ("single_task", "none"):
        raise ConfigError("reference must be 'single_task' or 'none'")
    cfg = ExperimentConfig(domains=specs, sequence=sequence, method=method, reference=reference,
                           out=top.get("out", "runs/default"), data_root=top.get("data_root", "data"),
                           train=train_cfg, model=enc)
    cfg.raw = effective_pairs(cfg)
    return cfg


def effective_pairs(cfg: ExperimentConfig) -> dict:
    """Every setting, defaults included, in config-file syntax."""
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ",".join(fmt(x) for x in v)
        return str(v)

    out = {"out": cfg.out, "data_root": cfg.data_root, "sequence": ",".join(cfg.sequence),
           "method": cfg.method, "reference": cfg.reference}
    for k, v in cfg.train.echo().items():
        out[f"train.{k}"] = fmt(v)
    for f in fields(EncoderConfig):
        if f.name in MODEL_KEYS:
            out[f"model.{f.name}"] = fmt(getattr(cfg.model, f.name))
    for d in cfg.domains:
        for k in sorted(DOMAIN_KEYS):
            out[f"domain.{d.name}.{k}"] = fmt(getattr(d, k))
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    if path is None:
        text, source = DEFAULT_CONFIG, "<default>"
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        source = str(path)
    pairs = parse_pairs(text, source)
    pairs.update(overrides or {})
    return build_config(pairs)
