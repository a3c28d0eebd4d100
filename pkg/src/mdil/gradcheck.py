"""Central finite-difference checks against the autodiff graph (double precision)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mdil import ops
from mdil.model import DauUnit, dau_forward
from mdil.tensor import Tensor, backward, mul, tsum

STEP = 1e-4
RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    ok: bool


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = STEP,
          rtol: float = RTOL, name: str = "", max_entries: int = 64,
          rng: np.random.Generator | None = None) -> CheckResult:
    """Compare analytic gradients of ``sum(fn(*inputs) * r)`` with central differences.

    A fixed random projection ``r`` makes every output element matter. At most
    ``max_entries`` coordinates per input are probed.
    """
    rng = rng or np.random.default_rng(0)
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)

    def scalar(vals):
        return float((fn(*[Tensor(v) for v in vals]).data * proj).sum())

    backward(tsum(mul(out, Tensor(proj))))
    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(x)
        flat = np.arange(x.size)
        if x.size > max_entries:
            flat = rng.choice(x.size, max_entries, replace=False)
        num = np.empty(len(flat))
        for n, i in enumerate(flat):
            idx = np.unravel_index(i, x.shape)
            plus = [v.copy() for v in inputs]
            minus = [v.copy() for v in inputs]
            plus[k][idx] += step
            minus[k][idx] -= step
            num[n] = (scalar(plus) - scalar(minus)) / (2 * step)
        worst = max(worst, _rel_error(analytic.ravel()[flat], num))
    return CheckResult(name, worst, worst <= rtol)


# op cases: each returns (fn, inputs) for a seed -----------------------------

def _conv(rng):
    stride = int(rng.integers(1, 3))
    return (lambda x, w: ops.conv2d(x, w, stride=stride),
            [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))])


def _conv1x1(rng):
    return (lambda x, w: ops.conv2d(x, w, pad=0),
            [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 1, 1))])


def _tconv(rng):
    k = int(rng.choice([2, 4]))
    return (lambda x, w: ops.transposed_conv2d(x, w),
            [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((3, 2, k, k))])


def _bn(rng):
    c = 3
    rm, rv = np.zeros(c), np.ones(c)

    def fn(x, g, b):
        return ops.batchnorm2d(x, g, b, rm.copy(), rv.copy(), "train")
    return fn, [rng.standard_normal((4, c, 3, 3)), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]


def _relu(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-2] += 0.05    # keep away from the kink
    return ops.relu, [x]


def _log_softmax(rng):
    return (lambda x: ops.log_softmax(x, axis=1), [rng.standard_normal((2, 5, 3, 3))])


def _cross_entropy(rng):
    y = rng.integers(0, 4, (2, 3, 3))
    y[0, 0, 0] = ops.IGNORE_INDEX
    return (lambda x: ops.cross_entropy(x, y), [rng.standard_normal((2, 4, 3, 3))])


def _kl(rng):
    teacher = Tensor(rng.standard_normal((2, 4, 3, 3)))
    return (lambda s: ops.kl_div(s, teacher), [rng.standard_normal((2, 4, 3, 3))])


def _dau(rng):
    unit = DauUnit("u", 3, rng, np.float64, adapters=True)
    unit.add_domain(0, rng)
    probe = _DauProbe(unit)
    return probe, [rng.standard_normal((2, 3, 4, 4))] + [getattr(o, a).data.copy() for o, a in probe.slots]


class _DauProbe:
    """Evaluates a DAU unit with its weights swapped for probe tensors."""

    def __init__(self, unit: DauUnit):
        self.unit = unit
        ad = unit.path(0)
        self.slots = [(unit, "w1"), (unit, "w2"), (ad, "aw1"), (ad, "aw2"),
                      (ad.bn1, "scale"), (ad.bn1, "shift"), (ad.bn2, "scale"), (ad.bn2, "shift")]

    def __call__(self, x, *vals):
        saved = [getattr(o, a) for o, a in self.slots]
        for (o, a), v in zip(self.slots, vals):
            setattr(o, a, v)
        try:
            return dau_forward(self.unit, x, 0, "train")
        finally:
            for (o, a), s in zip(self.slots, saved):
                setattr(o, a, s)


OP_CASES = {
    "conv2d": _conv,
    "conv2d_1x1": _conv1x1,
    "transposed_conv2d": _tconv,
    "batchnorm2d": _bn,
    "relu": _relu,
    "log_softmax": _log_softmax,
    "cross_entropy": _cross_entropy,
    "kl_div": _kl,
    "dau_unit": _dau,
}


def check_op(name: str, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    fn, inputs = OP_CASES[name](rng)
    res = check(fn, inputs, rng=np.random.default_rng(seed + 10_000))
    res.name = f"{name}[seed={seed}]"
    return res


def check_all(seeds: Sequence[int] = range(20), names: Sequence[str] | None = None) -> list[CheckResult]:
    return [check_op(n, s) for n in (names or OP_CASES) for s in seeds]
