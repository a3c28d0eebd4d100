"""Confusion matrices, mIoU, the incremental-learning drop score, and reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mdil.checkpoint import read_records, write_records
from mdil.data import IGNORE_ID
from mdil.tensor import no_grad

CSV_HEADER = ("method", "step", "domain", "miou", "delta", "delta_m")
GAIN_MARK = "↑"


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    num_classes: int
    counts: np.ndarray = None
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def evaluated(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored + other.ignored)


def accumulate_confusion(cm: ConfusionMatrix, pred, truth, ignore_index: int = IGNORE_ID) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {truth.shape}")
    c = cm.num_classes
    keep = truth != ignore_index
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"ground-truth label outside [0, {c})")
    if p.size and (p.min() < 0 or p.max() >= c):
        raise ValueError(f"predicted label outside [0, {c})")
    cm.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    cm.ignored += int((~keep).sum())
    return cm


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the union is empty) and their mean over non-empty classes."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise ValueError("mIoU undefined: every class has an empty union")
    iou = np.full(len(inter), np.nan)
    iou[present] = inter[present] / union[present]
    return iou, float(iou[present].mean())


def delta_m(model_mious: Sequence[float], baseline_mious: Sequence[float]) -> float:
    """Average relative mIoU drop versus per-task baselines, in percent.

    Positive values are drops; a negative value is a net gain.
    """
    if len(model_mious) != len(baseline_mious) or not model_mious:
        raise ValueError("need equal, non-empty lists of model and baseline mIoUs")
    total = 0.0
    for m, b in zip(model_mious, baseline_mious):
        if b <= 0:
            raise ValueError(f"baseline mIoU must be positive, got {b}")
        total += (m - b) / b
    return -100.0 * total / len(model_mious)


def format_delta_m(value: float) -> str:
    if value < 0:
        return f"{-value:.2f}% ({GAIN_MARK})"
    return f"{value:.2f}%"


def forgetting_delta(before: float, after: float) -> float:
    return after - before


@dataclass
class ResultRow:
    method: str
    step: int
    domain: str
    miou: float                      # percent
    delta: Optional[float] = None    # vs reference, percentage points
    delta_m: Optional[float] = None  # percent, same for all rows of a method


def _fmt(v: Optional[float], spec: str = ".2f") -> str:
    return "" if v is None else format(v, spec)


def render_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.method, r.step, r.domain, f"{r.miou:.2f}", _fmt(r.delta), _fmt(r.delta_m)])
    return buf.getvalue()


def parse_csv(text: str) -> list[ResultRow]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        m, step, dom, mi, de, dm = rec
        rows.append(ResultRow(m, int(step), dom, float(mi), float(de) if de else None,
                              float(dm) if dm else None))
    return rows


def render_table(rows: Sequence[ResultRow]) -> str:
    """Methods as rows, domains as columns, deltas in parentheses, then the drop score."""
    domains: list[str] = []
    methods: list[str] = []
    for r in rows:
        if r.domain not in domains:
            domains.append(r.domain)
        if r.method not in methods:
            methods.append(r.method)
    cell = {(r.method, r.domain): r for r in rows}
    show_dm = any(r.delta_m is not None for r in rows)
    header = ["Method"] + domains + (["dm%"] if show_dm else [])
    body = []
    for m in methods:
        line = [m]
        dm = None
        for d in domains:
            r = cell.get((m, d))
            if r is None:
                line.append("-")
                continue
            text = f"{r.miou:.2f}"
            if r.delta is not None:
                text += f" ({r.delta:+.2f})" if abs(r.delta) >= 0.005 else " (-0.00)"
            line.append(text)
            dm = r.delta_m if r.delta_m is not None else dm
        if show_dm:
            line.append("" if dm is None else format_delta_m(dm))
        body.append(line)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt_row = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([fmt_row(header), sep] + [fmt_row(b) for b in body]) + "\n"


def render_report(rows: Sequence[ResultRow]) -> tuple[str, str]:
    if not rows:
        raise ValueError("nothing to report")
    return render_table(rows), render_csv(rows)


def result_rows(method: str, step: int, mious: dict, reference: Optional[dict] = None) -> list[ResultRow]:
    """Rows for one method from ``{domain: mIoU%}``; deltas and drop score need ``reference``."""
    rows = []
    dm = None
    if reference:
        names = [d for d in mious if d in reference]
        if names:
            dm = delta_m([mious[d] for d in names], [reference[d] for d in names])
    for d, v in mious.items():
        delta = None
        if reference and d in reference:
            delta = forgetting_delta(reference[d], v)
        rows.append(ResultRow(method, step, d, v, delta, dm))
    return rows


def export_latents(model, images, labels, domain, path) -> np.ndarray:
    """Write final encoder features and per-pixel labels for external embedding tools."""
    x = np.asarray(images, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    with no_grad():
        feats = model.encode(x, domain, "infer").data
    name = model.domains[model.domain_index(domain)].name
    meta = {"kind": "latents", "domain": name, "feature_shape": list(feats.shape)}
    tensors = {"features": feats}
    if labels is not None:
        lbl = np.asarray(labels, dtype=np.int64)
        tensors["labels"] = lbl if lbl.ndim == 3 else lbl[None]
    write_records(path, meta, tensors)
    return feats


def load_latents(path) -> tuple[np.ndarray, Optional[np.ndarray], dict]:
    meta, tensors = read_records(path)
    if meta.get("kind") != "latents":
        raise ValueError(f"{path}: not a latent export")
    return tensors["features"], tensors.get("labels"), meta
