"""Fast built-in checks: gradients, routing isolation, metric vectors, checkpoint roundtrip."""
from __future__ import annotations

import tempfile
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from mdil import gradcheck
from mdil.checkpoint import checkpoint_load, checkpoint_save
from mdil.metrics import delta_m, forgetting_delta
from mdil.model import DomainSpec, EncoderConfig, add_domain, build_model
from mdil.tensor import inject_grad_fault, no_grad


@dataclass
class CheckOutcome:
    name: str
    ok: bool
    detail: str = ""


def _small_model(seed: int = 0):
    cfg = EncoderConfig(widths=(4, 8), units_per_stage=1, decoder_width=4)
    rng = np.random.default_rng(seed)
    model = build_model(cfg, DomainSpec("A", ("bg", "x", "y")), rng)
    add_domain(model, DomainSpec("B", ("bg", "x", "z", "w")), rng=rng)
    return model


def check_gradients(seeds=range(3)) -> CheckOutcome:
    bad = [r for r in gradcheck.check_all(seeds) if not r.ok]
    if bad:
        worst = max(bad, key=lambda r: r.max_rel_error)
        return CheckOutcome("gradients", False, f"{len(bad)} failing, worst {worst.name} "
                                                 f"rel err {worst.max_rel_error:.2e}")
    return CheckOutcome("gradients", True)


def check_isolation() -> CheckOutcome:
    model = _small_model()
    x = np.random.default_rng(1).random((2, 3, 8, 8)).astype(np.float32)
    with no_grad():
        before = model.forward(x, 0, "infer").data.copy()
        for p in model.domain_parameters(1):
            p.data = p.data + 1.0
        after = model.forward(x, 0, "infer").data
    if not np.array_equal(before, after):
        return CheckOutcome("isolation", False, "domain B parameters changed domain A outputs")
    return CheckOutcome("isolation", True)


def check_metrics() -> CheckOutcome:
    cases = [
        (delta_m([40.05, 52.74], [72.55, 54.1]), 23.66),
        (delta_m([65.21, 55.73], [72.55, 54.1]), 3.55),
        (delta_m([30.49, 32.05, 60.65], [72.55, 54.1, 61.97]), 33.62),
        (forgetting_delta(72.55, 40.05), -32.5),
        (forgetting_delta(54.1, 55.73), 1.63),
    ]
    for got, want in cases:
        if abs(got - want) > 0.01:
            return CheckOutcome("metrics", False, f"got {got:.4f}, expected {want}")
    return CheckOutcome("metrics", True)


def check_checkpoint() -> CheckOutcome:
    model = _small_model()
    model.freeze_domain(0)
    x = np.random.default_rng(2).random((1, 3, 8, 8)).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.mdil"
        checkpoint_save(model, path)
        loaded = checkpoint_load(path)
    with no_grad():
        for d in (0, 1):
            if not np.array_equal(model.forward(x, d).data, loaded.forward(x, d).data):
                return CheckOutcome("checkpoint", False, f"domain {d} output differs after reload")
    frozen = {p.name for p in loaded.parameters() if p.frozen}
    if frozen != {p.name for p in model.parameters() if p.frozen}:
        return CheckOutcome("checkpoint", False, "frozen flags not restored")
    return CheckOutcome("checkpoint", True)


CHECKS: dict[str, Callable[[], CheckOutcome]] = {
    "gradients": check_gradients,
    "isolation": check_isolation,
    "metrics": check_metrics,
    "checkpoint": check_checkpoint,
}


def run_selftest(inject_fault: Optional[str] = None, emit=print) -> bool:
    """Run every check, print one PASS/FAIL line each, return overall success.

    ``inject_fault`` names an op whose backward is deliberately corrupted for
    the duration of the run (a test hook for the harness itself).
    """
    ctx = inject_grad_fault(inject_fault, 1.5) if inject_fault else nullcontext()
    ok = True
    with ctx:
        for name, fn in CHECKS.items():
            start = time.perf_counter()
            try:
                res = fn()
            except Exception as exc:  # a crash is a failure of that check
                res = CheckOutcome(name, False, f"{type(exc).__name__}: {exc}")
            took = time.perf_counter() - start
            tail = f" ({res.detail})" if res.detail else ""
            emit(f"{'PASS' if res.ok else 'FAIL'} {res.name} [{took:.1f}s]{tail}")
            ok &= res.ok
    return ok
