"""Step-wise incremental training with a frozen teacher and per-group learning rates.

Each incremental step snapshots the current model as the teacher, registers
the new domain (copying the previous domain's specific weights unless told
otherwise), freezes every earlier domain's specific weights, and then trains
on the new domain only. Shared weights see the new domain's cross-entropy
plus a KL penalty that ties the earlier domains' predictions on the new images
to the teacher's; they are updated at ``lr / dlr``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from mdil import rng as rngmod
from mdil.data import IGNORE_ID, Dataset
from mdil.metrics import ConfusionMatrix, accumulate_confusion, miou
from mdil.model import DomainSpec, EncoderConfig, Model, Snapshot, add_domain, snapshot
from mdil.ops import cross_entropy, kl_div
from mdil.optim import SGD, ParamGroup
from mdil.tensor import Tensor, add, add_n, backward, mul

log = logging.getLogger(__name__)

FREEZE_SHARED = "freeze-shared"


@dataclass
class TrainConfig:
    lr: float = 0.05
    dlr: Union[float, str] = 100.0
    lambda_kld: float = 1.0
    epochs: int = 10
    batch_size: int = 4
    momentum: float = 0.9
    seed: int = 0
    init: str = "init_wt"          # or "random"
    distill: str = "all"           # or "last"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.dlr != FREEZE_SHARED:
            self.dlr = float(self.dlr)
            if self.dlr < 1:
                raise ValueError(f"dlr must be >= 1 or {FREEZE_SHARED!r}")
        if self.lambda_kld < 0:
            raise ValueError("lambda_kld must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.init not in ("init_wt", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.distill not in ("all", "last"):
            raise ValueError(f"unknown distill mode {self.distill!r}")

    @property
    def shared_lr(self) -> float:
        return 0.0 if self.dlr == FREEZE_SHARED else self.lr / self.dlr

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class LossBundle:
    l_ce: Tensor
    l_kld: Tensor
    l_ws: Tensor

    def values(self) -> dict:
        return {"l_ce": float(self.l_ce.data), "l_kld": float(self.l_kld.data),
                "l_ws": float(self.l_ws.data)}


@dataclass
class StepReport:
    method: str
    step: int
    domain: str
    epoch_losses: list = field(default_factory=list)
    miou: dict = field(default_factory=dict)       # domain -> percent
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    note: str = ""


Loader = Union[Dataset, Callable[[], Dataset]]


def _rng(cfg: TrainConfig, *keys) -> np.random.Generator:
    return rngmod.stream(cfg.seed, *keys)


def new_model(enc: EncoderConfig, cfg: TrainConfig, arch: str = "dau", single_head: bool = False,
              dtype=np.float32) -> Model:
    """Model shell holding only the shared encoder weights; no domain yet."""
    return Model(enc, _rng(cfg, rngmod.MODEL_INIT), arch=arch, single_head=single_head, dtype=dtype)


def begin_step(model: Model, spec: DomainSpec, cfg: TrainConfig,
               freeze_encoder: bool = False) -> Optional[Snapshot]:
    """Prepare ``model`` for learning ``spec``; returns the teacher snapshot.

    On the first step nothing is frozen and no teacher exists (returns None).
    """
    t = len(model.domains)
    g = _rng(cfg, rngmod.ADD_DOMAIN, t)
    if t == 0:
        model._register(spec, g, init_from=None)
        return None
    snap = snapshot(model)
    add_domain(model, spec, init=cfg.init, rng=g)
    for i in range(t):
        model.freeze_domain(i)
    if freeze_encoder:
        for p in model.shared_parameters():
            if p.name.startswith("enc."):
                p.freeze()
    return snap


def _targets(model: Model, t: int, y: np.ndarray) -> np.ndarray:
    if not model.single_head:
        return y
    lut = np.full(256, -1, dtype=np.int64)
    lut[:model.domains[t].num_classes] = model.union_indices(t)
    lut[IGNORE_ID] = IGNORE_ID
    return lut[y]


def compute_losses(model: Model, snap: Optional[Snapshot], batch, t, cfg: TrainConfig) -> LossBundle:
    x, y = batch
    d = model.domain_index(t)
    x = np.asarray(x, dtype=model.dtype)
    l_ce = cross_entropy(model.forward(x, d, "train"), _targets(model, d, y))
    prev = [] if d == 0 else (list(range(d)) if cfg.distill == "all" else [d - 1])
    if not prev or cfg.lambda_kld == 0:
        zero = Tensor(np.zeros((), dtype=model.dtype))
        return LossBundle(l_ce, zero, l_ce)
    if snap is None:
        raise ValueError(f"step {d + 1}: distillation needs a teacher snapshot")
    terms = [kl_div(model.forward(x, i, "infer"), snap.forward(x, i)) for i in prev]
    l_kld = mul(add_n(terms), cfg.lambda_kld)
    return LossBundle(l_ce, l_kld, add(l_ce, l_kld))


def make_optimizer(model: Model, cfg: TrainConfig, first_step: bool = False) -> SGD:
    """Domain-specific weights at ``lr``, shared weights at ``lr / dlr``.

    On the first step there is nothing to protect, so everything trains at ``lr``.
    """
    trainable = [p for p in model.parameters() if not p.frozen]
    specific = [p for p in trainable if p.group != "shared"]
    shared = [p for p in trainable if p.group == "shared"]
    shared_lr = cfg.lr if first_step else cfg.shared_lr
    return SGD([ParamGroup(specific, cfg.lr, "specific"), ParamGroup(shared, shared_lr, "shared")],
               momentum=cfg.momentum)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(model: Model, snap: Optional[Snapshot], dataset: Dataset, t, cfg: TrainConfig,
                opt: SGD, rng: np.random.Generator) -> dict:
    """One shuffled pass; a single backward of ``l_ce + l_kld`` feeds both groups.

    The KL term never reaches the new domain's weights (they are not on any
    earlier domain's path), so this equals updating them on ``l_ce`` alone.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    sums = {"l_ce": 0.0, "l_kld": 0.0, "l_ws": 0.0}
    n = 0
    for idx in batches(len(dataset), cfg.batch_size, rng):
        bundle = compute_losses(model, snap, dataset.batch(idx), t, cfg)
        backward(bundle.l_ws)
        opt.step()
        for k, v in bundle.values().items():
            sums[k] += v
        n += 1
    return {k: v / n for k, v in sums.items()}


def evaluate(model: Model, val_sets: Mapping[str, Dataset], batch_size: int = 16) -> dict:
    """``{domain: ConfusionMatrix}`` for every registered domain with a validation set."""
    out = {}
    for spec in model.domains:
        ds = val_sets.get(spec.name)
        if ds is None:
            continue
        cm = ConfusionMatrix(spec.num_classes)
        for start in range(0, len(ds), batch_size):
            x, y = ds.batch(range(start, min(start + batch_size, len(ds))))
            accumulate_confusion(cm, model.predict(x.astype(model.dtype), spec.name), y)
        out[spec.name] = cm
    return out


def miou_percent(cms: Mapping[str, ConfusionMatrix]) -> dict:
    return {name: round(100.0 * miou(cm)[1], 6) for name, cm in cms.items()}


def train_step(model: Model, spec: DomainSpec, train: Loader, cfg: TrainConfig,
               freeze_encoder: bool = False, method: str = "ours") -> tuple[StepReport, Optional[Snapshot]]:
    """Run one incremental step end to end (without evaluation)."""
    start = time.perf_counter()
    snap = begin_step(model, spec, cfg, freeze_encoder=freeze_encoder)
    t = len(model.domains) - 1
    dataset = train() if callable(train) else train
    opt = make_optimizer(model, cfg, first_step=t == 0)
    shuffle = _rng(cfg, rngmod.SHUFFLE, t)
    report = StepReport(method, t + 1, spec.name, config=cfg.echo())
    for epoch in range(cfg.epochs):
        losses = train_epoch(model, snap, dataset, t, cfg, opt, shuffle)
        report.epoch_losses.append(losses)
        log.info("%s step %d (%s) epoch %d: %s", method, t + 1, spec.name, epoch + 1,
                 " ".join(f"{k}={v:.4f}" for k, v in losses.items()))
    report.wall_time = time.perf_counter() - start
    return report, snap


def run_sequence(specs: Sequence[DomainSpec], train: Mapping[str, Loader], val: Mapping[str, Dataset],
                 cfg: Union[TrainConfig, Sequence[TrainConfig]], enc: EncoderConfig = EncoderConfig(),
                 arch: str = "dau", single_head: bool = False, freeze_encoder: bool = False,
                 method: str = "ours", model: Optional[Model] = None,
                 on_step: Optional[Callable[[int, Model, StepReport], None]] = None,
                 ) -> tuple[list[StepReport], Model]:
    """Learn ``specs`` in order; after each step evaluate every registered domain.

    ``train[name]`` may be a Dataset or a zero-argument loader; it is fetched
    when its step starts and dropped when the step ends. ``cfg`` may be one
    config or one per step.
    """
    if not specs:
        raise ValueError("empty domain sequence")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate domains in sequence {names}")
    cfgs = list(cfg) if isinstance(cfg, (list, tuple)) else [cfg] * len(specs)
    if len(cfgs) != len(specs):
        raise ValueError("need one TrainConfig per step")
    if model is None:
        model = new_model(enc, cfgs[0], arch=arch, single_head=single_head)
    reports = []
    for spec, step_cfg in zip(specs, cfgs):
        report, _ = train_step(model, spec, train[spec.name], step_cfg,
                               freeze_encoder=freeze_encoder, method=method)
        report.miou = miou_percent(evaluate(model, val))
        reports.append(report)
        if on_step is not None:
            on_step(report.step, model, report)
    return reports, model
