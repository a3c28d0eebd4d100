"""Reference training regimes and the ablation grid.

Every method is a combination of four switches plus a few structural
choices:

=================  =====  ===  =======  ===
method             L_KLD  dlr  init_Wt  DAU
=================  =====  ===  =======  ===
single_task          -     -      -      -
dau_ft               -     -      -      x
dau_ft_dlr1          -     -      x      x
dau_ft_rinit         -     x      -      x
dau_ft_dlr           -     x      x      x
ours                 x     x      x      x
=================  =====  ===  =======  ===

The adapter-free baselines (fine-tuning, feature extraction, LwF, joint
training) run on the plain network: the DAU network without adapters and
with one BN set shared by all domains.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from mdil import rng as rngmod
from mdil.data import Dataset
from mdil.labels import UnionLabelSpace, remap_labels
from mdil.model import DomainSpec, EncoderConfig, Model
from mdil.ops import cross_entropy
from mdil.optim import SGD, ParamGroup
from mdil.tensor import backward
from mdil.trainer import (Loader, StepReport, TrainConfig, evaluate, miou_percent, new_model,
                          run_sequence)

__all__ = ["KINDS", "METHODS", "MethodFlags", "UnionLabelSpace", "remap_labels", "method_config",
           "run_baseline", "run_method", "train_joint"]


@dataclass(frozen=True)
class MethodFlags:
    kld: bool
    dlr: bool
    init_wt: bool
    dau: bool
    single_head: bool = False
    freeze_encoder: bool = False
    joint: bool = False

    @property
    def arch(self) -> str:
        return "dau" if self.dau else "plain"

    def table5(self) -> tuple:
        return (self.kld, self.dlr, self.init_wt, self.dau)


METHODS = {
    "ours": MethodFlags(kld=True, dlr=True, init_wt=True, dau=True),
    "single_task": MethodFlags(False, False, False, False),
    "joint_multitask": MethodFlags(False, False, False, False, joint=True),
    "ft_multihead": MethodFlags(False, False, False, False),
    "ft_singlehead": MethodFlags(False, False, False, False, single_head=True),
    "feature_extract": MethodFlags(False, False, False, False, freeze_encoder=True),
    "lwf_multihead": MethodFlags(True, False, False, False),
    "dau_ft": MethodFlags(False, False, False, True),
    "dau_ft_dlr1": MethodFlags(False, False, True, True),
    "dau_ft_rinit": MethodFlags(False, True, False, True),
    "dau_ft_dlr": MethodFlags(False, True, True, True),
}
KINDS = tuple(k for k in METHODS if k != "ours")


def method_config(kind: str, base: TrainConfig) -> TrainConfig:
    """``base`` with the method's switches applied (KLD weight, dlr, initialization)."""
    try:
        f = METHODS[kind]
    except KeyError:
        raise ValueError(f"unknown method {kind!r}; expected one of {sorted(METHODS)}") from None
    return replace(base,
                   lambda_kld=base.lambda_kld if f.kld else 0.0,
                   dlr=base.dlr if f.dlr else 1.0,
                   init="init_wt" if f.init_wt else "random")


def run_method(kind: str, specs: Sequence[DomainSpec], train: Mapping[str, Loader],
               val: Mapping[str, Dataset], cfg: TrainConfig, enc: EncoderConfig = EncoderConfig(),
               model: Optional[Model] = None, on_step=None) -> tuple[list[StepReport], Model]:
    """Train ``kind`` over ``specs``; pass ``model`` to continue an existing run."""
    flags = METHODS.get(kind)
    if flags is None:
        raise ValueError(f"unknown method {kind!r}")
    if kind == "single_task" and len(specs) != 1:
        raise ValueError("single_task trains exactly one domain")
    if flags.joint:
        if model is not None:
            raise ValueError("joint_multitask always starts from scratch")
        return train_joint(specs, train, val, cfg, enc)
    return run_sequence(specs, train, val, method_config(kind, cfg), enc=enc, arch=flags.arch,
                        single_head=flags.single_head, freeze_encoder=flags.freeze_encoder,
                        method=kind, model=model, on_step=on_step)


def run_baseline(kind: str, specs: Sequence[DomainSpec], train: Mapping[str, Loader],
                 val: Mapping[str, Dataset], cfg: TrainConfig,
                 enc: EncoderConfig = EncoderConfig(), **kw) -> tuple[list[StepReport], Model]:
    if kind not in KINDS:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {KINDS}")
    return run_method(kind, specs, train, val, cfg, enc, **kw)


def train_joint(specs: Sequence[DomainSpec], train: Mapping[str, Loader], val: Mapping[str, Dataset],
                cfg: TrainConfig, enc: EncoderConfig = EncoderConfig()) -> tuple[list[StepReport], Model]:
    """Offline multi-head training on every domain at once (not incremental).

    Each epoch interleaves one batch per domain in sequence order.
    """
    if not specs:
        raise ValueError("empty domain list")
    start = time.perf_counter()
    model = new_model(enc, cfg, arch="plain")
    for t, spec in enumerate(specs):
        model._register(spec, rngmod.stream(cfg.seed, rngmod.ADD_DOMAIN, t), init_from=None)
    data = [train[s.name]() if callable(train[s.name]) else train[s.name] for s in specs]
    opt = SGD([ParamGroup(list(model.parameters()), cfg.lr, "all")], momentum=cfg.momentum)
    shuffle = rngmod.stream(cfg.seed, rngmod.SHUFFLE, 0)
    report = StepReport("joint_multitask", 1, "+".join(s.name for s in specs), config=cfg.echo(),
                        note="joint training reads every domain's data at once; not incremental")
    for _ in range(cfg.epochs):
        queues = [list(_chunks(shuffle.permutation(len(ds)), cfg.batch_size)) for ds in data]
        total, n = 0.0, 0
        for k in range(max(len(q) for q in queues)):
            for t, (ds, q) in enumerate(zip(data, queues)):
                if k >= len(q):
                    continue
                x, y = ds.batch(q[k])
                loss = cross_entropy(model.forward(x.astype(model.dtype), t, "train"), y)
                backward(loss)
                opt.step()
                total += float(loss.data)
                n += 1
        report.epoch_losses.append({"l_ce": total / n, "l_kld": 0.0, "l_ws": total / n})
    report.miou = miou_percent(evaluate(model, val))
    report.wall_time = time.perf_counter() - start
    return [report], model


def _chunks(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]
