"""Segmentation network with shared encoder weights and per-domain adapters.

Parameter names follow a fixed scheme (``d`` is the 0-based domain index in
registration order)::

    enc.stage{i}.down.w                       shared strided 3x3 conv
    enc.stage{i}.down.dom{d}.bn.{scale|shift} per-domain BN after it
    enc.stage{i}.unit{j}.{w1|w2}              shared 3x3 convs of a DAU
    enc.stage{i}.unit{j}.dom{d}.{aw1|aw2}     per-domain parallel 1x1 adapters
    enc.stage{i}.unit{j}.dom{d}.{bn1|bn2}.{scale|shift}
    dec.dom{d}.up{k}.w, dec.dom{d}.up{k}.bn.{scale|shift}, dec.dom{d}.cls.w

The adapter-free ("plain") network used by the baselines drops the ``aw``
adapters and the ``dom{d}`` segment of every encoder BN, which is then
shared. A single-head model has one decoder named ``dec.head``.
Running statistics are buffers named ``<bn>.running_mean`` / ``<bn>.running_var``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from mdil.ops import batchnorm2d, conv2d, relu, transposed_conv2d
from mdil.tensor import Parameter, Tensor, add, no_grad

ADAPTER_INIT_STD = 0.01

DomainKey = Union[int, str]


@dataclass(frozen=True)
class DomainSpec:
    name: str
    classes: tuple
    location: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise ValueError(f"domain {self.name!r}: empty label space")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"domain {self.name!r}: duplicate class names")

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple = (16, 32, 64)
    units_per_stage: int = 2
    in_channels: int = 3
    up_kernels: tuple = ()      # per decoder block; empty -> all 4
    decoder_width: int = 6

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be nondecreasing")
        if self.units_per_stage < 0 or self.in_channels <= 0:
            raise ValueError("bad unit count or input channels")
        if self.decoder_width <= 0:
            raise ValueError("decoder_width must be positive")
        if not self.up_kernels:
            object.__setattr__(self, "up_kernels", (4,) * len(self.widths))
        object.__setattr__(self, "up_kernels", tuple(int(k) for k in self.up_kernels))
        if len(self.up_kernels) != len(self.widths):
            raise ValueError("need one up_kernel per stage")
        if any(k not in (2, 4) for k in self.up_kernels):
            raise ValueError("up kernels must be 2 or 4")

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.widths)


def _init(rng: np.random.Generator, shape, fan_in: float, dtype) -> np.ndarray:
    """Uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.

    Smaller than He scaling; behind BN this acts as a larger effective step
    size, which the short desk-scale schedules need.
    """
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class BatchNorm:
    """Affine batch normalization. Runs in inference mode whenever frozen."""

    def __init__(self, prefix: str, channels: int, dtype, group: str = "shared",
                 domain: Optional[int] = None):
        self.prefix = prefix
        self.scale = Parameter(f"{prefix}.scale", np.ones(channels, dtype), group, domain)
        self.shift = Parameter(f"{prefix}.shift", np.zeros(channels, dtype), group, domain)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if getattr(self.scale, "frozen", False):
            mode = "infer"
        return batchnorm2d(x, self.scale, self.shift, self.running_mean, self.running_var, mode)

    def parameters(self) -> Iterator[Parameter]:
        yield self.scale
        yield self.shift

    def buffers(self) -> dict:
        return {f"{self.prefix}.running_mean": self.running_mean,
                f"{self.prefix}.running_var": self.running_var}

    def copy_state(self, other: "BatchNorm"):
        self.scale.data[...] = other.scale.data
        self.shift.data[...] = other.shift.data
        self.running_mean[...] = other.running_mean
        self.running_var[...] = other.running_var


@dataclass
class DomainAdapters:
    aw1: Optional[Parameter]
    aw2: Optional[Parameter]
    bn1: BatchNorm
    bn2: BatchNorm

    def parameters(self) -> Iterator[Parameter]:
        if self.aw1 is not None:
            yield self.aw1
            yield self.aw2
        yield from self.bn1.parameters()
        yield from self.bn2.parameters()


class DauUnit:
    """Residual unit with shared 3x3 convs and per-domain 1x1 adapters and BN.

    With ``adapters=False`` it is a plain residual unit whose two BN layers are
    shared by every domain.
    """

    def __init__(self, prefix: str, channels: int, rng: np.random.Generator, dtype,
                 adapters: bool = True):
        self.prefix = prefix
        self.channels = channels
        self.dtype = dtype
        self.has_adapters = adapters
        fan = channels * 9
        self.w1 = Parameter(f"{prefix}.w1", _init(rng, (channels, channels, 3, 3), fan, dtype))
        self.w2 = Parameter(f"{prefix}.w2", _init(rng, (channels, channels, 3, 3), fan, dtype))
        self.domains: dict[int, DomainAdapters] = {}
        if not adapters:
            self.shared = DomainAdapters(None, None, BatchNorm(f"{prefix}.bn1", channels, dtype),
                                         BatchNorm(f"{prefix}.bn2", channels, dtype))

    def add_domain(self, d: int, rng: Optional[np.random.Generator], source: Optional[int] = None):
        if not self.has_adapters:
            return
        if d in self.domains:
            raise ValueError(f"{self.prefix}: domain {d} already registered")
        c, p = self.channels, f"{self.prefix}.dom{d}"
        if source is None:
            aw1 = rng.standard_normal((c, c, 1, 1)) * ADAPTER_INIT_STD
            aw2 = rng.standard_normal((c, c, 1, 1)) * ADAPTER_INIT_STD
        else:
            aw1 = self.domains[source].aw1.data.copy()
            aw2 = self.domains[source].aw2.data.copy()
        ad = DomainAdapters(
            Parameter(f"{p}.aw1", aw1.astype(self.dtype), "domain", d),
            Parameter(f"{p}.aw2", aw2.astype(self.dtype), "domain", d),
            BatchNorm(f"{p}.bn1", c, self.dtype, "domain", d),
            BatchNorm(f"{p}.bn2", c, self.dtype, "domain", d),
        )
        if source is not None:
            ad.bn1.copy_state(self.domains[source].bn1)
            ad.bn2.copy_state(self.domains[source].bn2)
        self.domains[d] = ad

    def path(self, d: int) -> DomainAdapters:
        if not self.has_adapters:
            return self.shared
        try:
            return self.domains[d]
        except KeyError:
            raise KeyError(f"{self.prefix}: domain {d} is not registered") from None

    def forward(self, x: Tensor, d: int, mode: str) -> Tensor:
        return dau_forward(self, x, d, mode)

    def parameters(self) -> Iterator[Parameter]:
        yield self.w1
        yield self.w2
        if self.has_adapters:
            for d in sorted(self.domains):
                yield from self.domains[d].parameters()
        else:
            yield from self.shared.parameters()

    def batchnorms(self) -> Iterator[BatchNorm]:
        paths = [self.domains[d] for d in sorted(self.domains)] if self.has_adapters else [self.shared]
        for ad in paths:
            yield ad.bn1
            yield ad.bn2


def dau_forward(unit: DauUnit, x: Tensor, d: int, mode: str) -> Tensor:
    """``relu(x + BN2(w2*h + a2*h))`` with ``h = relu(BN1(w1*x + a1*x))``."""
    ad = unit.path(d)
    z1 = conv2d(x, unit.w1)
    if ad.aw1 is not None:
        z1 = add(z1, conv2d(x, ad.aw1, pad=0))
    h1 = relu(ad.bn1(z1, mode))
    z2 = conv2d(h1, unit.w2)
    if ad.aw2 is not None:
        z2 = add(z2, conv2d(h1, ad.aw2, pad=0))
    return relu(add(x, ad.bn2(z2, mode)))


class Downsampler:
    """Shared strided 3x3 conv followed by (per-domain or shared) BN and ReLU."""

    def __init__(self, prefix: str, cin: int, cout: int, rng, dtype, per_domain: bool = True):
        self.prefix = prefix
        self.cout = cout
        self.dtype = dtype
        self.per_domain = per_domain
        self.w = Parameter(f"{prefix}.w", _init(rng, (cout, cin, 3, 3), cin * 9, dtype))
        self.bns: dict[int, BatchNorm] = {}
        if not per_domain:
            self.bn = BatchNorm(f"{prefix}.bn", cout, dtype)

    def add_domain(self, d: int, source: Optional[int] = None):
        if not self.per_domain:
            return
        bn = BatchNorm(f"{self.prefix}.dom{d}.bn", self.cout, self.dtype, "domain", d)
        if source is not None:
            bn.copy_state(self.bns[source])
        self.bns[d] = bn

    def batchnorm(self, d: int) -> BatchNorm:
        if not self.per_domain:
            return self.bn
        try:
            return self.bns[d]
        except KeyError:
            raise KeyError(f"{self.prefix}: domain {d} is not registered") from None

    def forward(self, x: Tensor, d: int, mode: str) -> Tensor:
        return relu(self.batchnorm(d)(conv2d(x, self.w, stride=2, pad=1), mode))

    def parameters(self) -> Iterator[Parameter]:
        yield self.w
        for bn in self.batchnorms():
            yield from bn.parameters()

    def batchnorms(self) -> Iterator[BatchNorm]:
        if self.per_domain:
            for d in sorted(self.bns):
                yield self.bns[d]
        else:
            yield self.bn


class DecoderHead:
    """Transposed-conv x2 blocks (conv, BN, ReLU; the last without ReLU) then a 1x1 classifier."""

    def __init__(self, prefix: str, cfg: EncoderConfig, num_classes: int, rng, dtype,
                 group: str = "decoder", domain: Optional[int] = None):
        self.prefix = prefix
        self.dtype = dtype
        self.group, self.domain = group, domain
        cin = cfg.widths[-1]
        cout = cfg.decoder_width
        self.ups: list[tuple[Parameter, BatchNorm]] = []
        for i, k in enumerate(cfg.up_kernels):
            fan = cin * (k / 2) ** 2
            w = Parameter(f"{prefix}.up{i}.w", _init(rng, (cin, cout, k, k), fan, dtype), group, domain)
            self.ups.append((w, BatchNorm(f"{prefix}.up{i}.bn", cout, dtype, group, domain)))
            cin = cout
        self.feat = cout
        self.cls = Parameter(f"{prefix}.cls.w", self._cls_init(rng, num_classes), group, domain)

    def _cls_init(self, rng, n: int) -> np.ndarray:
        return _init(rng, (n, self.feat, 1, 1), self.feat, self.dtype)

    @property
    def num_classes(self) -> int:
        return self.cls.shape[0]

    def copy_body(self, other: "DecoderHead"):
        for (w, bn), (ow, obn) in zip(self.ups, other.ups):
            w.data[...] = ow.data
            bn.copy_state(obn)

    def grow(self, n_new: int, rng):
        """Append ``n_new`` randomly initialized classifier rows."""
        extra = self._cls_init(rng, n_new)
        self.cls.data = np.concatenate([self.cls.data, extra], axis=0)

    def forward(self, h: Tensor, mode: str) -> Tensor:
        last = len(self.ups) - 1
        for i, (w, bn) in enumerate(self.ups):
            h = bn(transposed_conv2d(h, w), mode)
            if i < last:    # a ReLU right before a narrow classifier can kill whole channels
                h = relu(h)
        return conv2d(h, self.cls, pad=0)

    def parameters(self) -> Iterator[Parameter]:
        for w, bn in self.ups:
            yield w
            yield from bn.parameters()
        yield self.cls

    def batchnorms(self) -> Iterator[BatchNorm]:
        for _, bn in self.ups:
            yield bn


@dataclass
class Stage:
    down: Downsampler
    units: list


@dataclass(frozen=True)
class ParamPartition:
    shared: frozenset
    domains: dict
    frozen: frozenset

    def domain(self, d: int) -> frozenset:
        return self.domains.get(d, frozenset())


class Model:
    """Encoder of downsampling stages and DAUs plus per-domain decoder heads.

    ``arch`` is ``"dau"`` (shared convs + per-domain adapters and BN) or
    ``"plain"`` (no adapters, shared BN). ``single_head`` replaces the
    per-domain heads with one head over the union of all label spaces.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, arch: str = "dau",
                 single_head: bool = False, dtype=np.float32):
        if arch not in ("dau", "plain"):
            raise ValueError(f"unknown arch {arch!r}")
        self.cfg = cfg
        self.arch = arch
        self.single_head = single_head
        self.dtype = np.dtype(dtype)
        self.domains: list[DomainSpec] = []
        self.union: list[str] = []
        dau = arch == "dau"
        self.stages: list[Stage] = []
        cin = cfg.in_channels
        for i, width in enumerate(cfg.widths):
            down = Downsampler(f"enc.stage{i}.down", cin, width, rng, self.dtype, per_domain=dau)
            units = [DauUnit(f"enc.stage{i}.unit{j}", width, rng, self.dtype, adapters=dau)
                     for j in range(cfg.units_per_stage)]
            self.stages.append(Stage(down, units))
            cin = width
        self.heads: dict[int, DecoderHead] = {}
        self.head: Optional[DecoderHead] = None

    # domain registry
    @property
    def domain_names(self) -> list[str]:
        return [s.name for s in self.domains]

    def domain_index(self, t: DomainKey) -> int:
        if isinstance(t, (int, np.integer)):
            if 0 <= t < len(self.domains):
                return int(t)
        else:
            for i, s in enumerate(self.domains):
                if s.name == t:
                    return i
        raise KeyError(f"domain {t!r} is not registered")

    def _register(self, spec: DomainSpec, rng, init_from: Optional[int]):
        if spec.name in self.domain_names:
            raise ValueError(f"domain {spec.name!r} already registered")
        d = len(self.domains)
        for stage in self.stages:
            stage.down.add_domain(d, source=init_from)
            for unit in stage.units:
                unit.add_domain(d, rng, source=init_from)
        if self.single_head:
            new = [c for c in spec.classes if c not in self.union]
            if self.head is None:
                self.union = list(spec.classes)
                self.head = DecoderHead("dec.head", self.cfg, len(self.union), rng, self.dtype, "shared")
            elif new:
                self.union.extend(new)
                self.head.grow(len(new), rng)
        else:
            head = DecoderHead(f"dec.dom{d}", self.cfg, spec.num_classes, rng, self.dtype,
                               "decoder", d)
            if init_from is not None:
                head.copy_body(self.heads[init_from])
            self.heads[d] = head
        self.domains.append(spec)

    # forward
    def encode(self, x, t: DomainKey, mode: str = "infer") -> Tensor:
        d = self.domain_index(t)
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if h.shape[1] != self.cfg.in_channels:
            raise ValueError(f"input has {h.shape[1]} channels, model expects {self.cfg.in_channels}")
        f = self.cfg.downsample_factor
        if h.shape[2] % f or h.shape[3] % f:
            raise ValueError(f"spatial size {h.shape[2:]} must be divisible by {f}")
        for stage in self.stages:
            h = stage.down.forward(h, d, mode)
            for unit in stage.units:
                h = dau_forward(unit, h, d, mode)
        return h

    def forward(self, x, t: DomainKey, mode: str = "infer") -> Tensor:
        """Logits over the domain's label space (union space for single-head)."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        d = self.domain_index(t)
        h = self.encode(x, d, mode)
        head = self.head if self.single_head else self.heads[d]
        return head.forward(h, mode)

    __call__ = forward

    def union_indices(self, t: DomainKey) -> np.ndarray:
        spec = self.domains[self.domain_index(t)]
        return np.array([self.union.index(c) for c in spec.classes])

    def predict(self, x, t: DomainKey) -> np.ndarray:
        """Arg-max labels in the domain's local label space (ties -> lowest index)."""
        with no_grad():
            logits = self.forward(x, t, "infer").data
        if self.single_head:
            logits = logits[:, self.union_indices(t)]
        return logits.argmax(axis=1)

    # parameters
    def parameters(self) -> Iterator[Parameter]:
        for stage in self.stages:
            yield from stage.down.parameters()
            for unit in stage.units:
                yield from unit.parameters()
        if self.single_head:
            if self.head is not None:
                yield from self.head.parameters()
        else:
            for d in sorted(self.heads):
                yield from self.heads[d].parameters()

    def named_parameters(self) -> dict:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def batchnorms(self) -> Iterator[BatchNorm]:
        for stage in self.stages:
            yield from stage.down.batchnorms()
            for unit in stage.units:
                yield from unit.batchnorms()
        heads = ([self.head] if self.head is not None else []) if self.single_head else \
            [self.heads[d] for d in sorted(self.heads)]
        for head in heads:
            yield from head.batchnorms()

    def buffers(self) -> dict:
        out = {}
        for bn in self.batchnorms():
            out.update(bn.buffers())
        return out

    def domain_parameters(self, t: DomainKey) -> list[Parameter]:
        d = self.domain_index(t)
        return [p for p in self.parameters() if p.domain == d]

    def shared_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.group == "shared"]

    def freeze_domain(self, t: DomainKey):
        for p in self.domain_parameters(t):
            p.freeze()


def build_model(cfg: EncoderConfig, first_domain: DomainSpec, rng: np.random.Generator,
                arch: str = "dau", single_head: bool = False, dtype=np.float32) -> Model:
    """Fresh model with one registered domain.

    Draw order: shared convs stage by stage, then the first domain's adapters
    (normal, std 0.01) and head. BN starts at scale 1, shift 0.
    """
    model = Model(cfg, rng, arch=arch, single_head=single_head, dtype=dtype)
    model._register(first_domain, rng, init_from=None)
    return model


def add_domain(model: Model, spec: DomainSpec, init: str = "init_wt",
               rng: Optional[np.random.Generator] = None) -> int:
    """Register ``spec``; returns its index.

    ``init="init_wt"`` copies the previous domain's adapters, BN state and
    decoder body bitwise and draws only a fresh classifier; ``"random"``
    draws everything anew.
    """
    if init not in ("init_wt", "random"):
        raise ValueError(f"unknown init {init!r}")
    if rng is None:
        raise ValueError("add_domain needs an rng for the classifier")
    source = len(model.domains) - 1 if init == "init_wt" and model.domains else None
    model._register(spec, rng, init_from=source)
    return len(model.domains) - 1


def param_partition(model) -> ParamPartition:
    shared, frozen = set(), set()
    domains: dict[int, set] = {}
    for p in model.parameters():
        if p.group == "shared":
            shared.add(p.name)
        else:
            domains.setdefault(p.domain, set()).add(p.name)
        if p.frozen:
            frozen.add(p.name)
    return ParamPartition(frozenset(shared), {d: frozenset(s) for d, s in domains.items()},
                          frozenset(frozen))


def count_parameters(params) -> int:
    return int(sum(p.data.size for p in params))


def sharing_ratio(model) -> float:
    """Fraction of learnable scalars that are shared across domains."""
    params = list(model.parameters())
    total = count_parameters(params)
    return count_parameters(p for p in params if p.group == "shared") / total


class Snapshot:
    """Frozen deep copy of a model that always runs in inference mode."""

    def __init__(self, model: Model):
        src = model.model if isinstance(model, Snapshot) else model
        self.model = copy.deepcopy(src)
        for p in self.model.parameters():
            p.freeze()

    @property
    def domains(self):
        return self.model.domains

    def forward(self, x, t: DomainKey) -> Tensor:
        with no_grad():
            return self.model.forward(x, t, "infer")

    __call__ = forward


def snapshot(model) -> Snapshot:
    return Snapshot(model)
