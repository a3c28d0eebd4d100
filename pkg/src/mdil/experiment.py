"""Desk-scale two-step (A then B) comparison shared by the CLI and the acceptance tests."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

from mdil.baselines import METHODS, run_method
from mdil.data import DomainGenSpec, default_domain_specs, generate_domain
from mdil.model import DomainSpec, EncoderConfig
from mdil.trainer import TrainConfig


def model_spec(gen: DomainGenSpec) -> DomainSpec:
    return DomainSpec(gen.name, gen.classes)


def generate_all(specs: Sequence[DomainGenSpec]) -> tuple[dict, dict]:
    train = {s.name: generate_domain(s, "train") for s in specs}
    val = {s.name: generate_domain(s, "val") for s in specs}
    return train, val


@dataclass
class TwoStepResult:
    seed: int
    before: dict = field(default_factory=dict)      # arch -> mIoU(A) after step 1
    after_old: dict = field(default_factory=dict)   # method -> mIoU(A) after step 2
    after_new: dict = field(default_factory=dict)   # method -> mIoU(B) after step 2
    seconds: float = 0.0

    def forgetting(self, method: str) -> float:
        """Old-domain mIoU lost during step 2, in points (positive = forgot)."""
        return self.before[METHODS[method].arch] - self.after_old[method]


def two_step(seed: int, methods: Sequence[str] = ("ft_multihead", "feature_extract", "ours", "dau_ft_dlr"),
             cfg: TrainConfig = TrainConfig(), enc: EncoderConfig = EncoderConfig(),
             specs: Sequence[DomainGenSpec] | None = None) -> TwoStepResult:
    """Train A once per architecture, then B once per method starting from a copy.

    Step 1 does not depend on the method switches (no teacher, full learning
    rate everywhere, nothing frozen), so sharing it is exact.
    """
    start = time.perf_counter()
    if specs is None:
        specs = default_domain_specs(seed=seed)[:2]
    a, b = (model_spec(s) for s in specs[:2])
    train, val = generate_all(specs[:2])
    cfg = replace(cfg, seed=seed)
    res = TwoStepResult(seed)
    step1 = {}
    for m in methods:
        arch = METHODS[m].arch
        if arch not in step1:
            reports, model = run_method(m, [a], train, val, cfg, enc)
            step1[arch] = model
            res.before[arch] = reports[0].miou[a.name]
        model = copy.deepcopy(step1[arch])
        reports, _ = run_method(m, [b], train, val, cfg, enc, model=model)
        res.after_old[m] = reports[-1].miou[a.name]
        res.after_new[m] = reports[-1].miou[b.name]
    res.seconds = time.perf_counter() - start
    return res
