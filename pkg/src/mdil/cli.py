"""Command-line entry point: ``mdil {gen-domains,run,eval,report,selftest}``.

Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 failed check.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from mdil import __version__
from mdil.baselines import KINDS, METHODS, run_method
from mdil.checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from mdil.config import ConfigError, ExperimentConfig, load_config
from mdil.data import DataFormatError, generate_domain, load_dataset, write_dataset
from mdil.metrics import (ResultRow, accumulate_confusion, ConfusionMatrix, miou, parse_csv,
                          render_csv, render_table, result_rows)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("mdil")


class DataError(Exception):
    """Missing or malformed dataset, checkpoint or report (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# gen-domains ---------------------------------------------------------------

def cmd_gen_domains(cfg: ExperimentConfig, emit=print) -> list[Path]:
    root = Path(cfg.data_root)
    written = []
    for spec in cfg.domains:
        splits = {split: generate_domain(spec, split) for split in ("train", "val")}
        try:
            written.append(write_dataset(splits, root, spec.name, spec.classes))
        except OSError as exc:
            raise DataError(f"cannot write to {root}: {exc.strerror}") from None
        emit(f"wrote {written[-1]} ({spec.n_train} train, {spec.n_val} val)")
    return written


# run ------------------------------------------------------------------------

def _load(cfg: ExperimentConfig, name: str, split: str):
    try:
        ds = load_dataset(cfg.data_root, name, split)
    except (DataFormatError, OSError) as exc:
        raise DataError(f"domain {name!r}: {exc} (run 'mdil gen-domains' first?)") from None
    expected = cfg.domain(name).classes
    if tuple(ds.classes) != tuple(expected):
        raise DataError(f"domain {name!r}: labels.txt lists {list(ds.classes)}, config says {list(expected)}")
    if len(ds) == 0:
        raise DataError(f"domain {name!r}: empty {split} split")
    return ds


def _echo_block(cfg: ExperimentConfig) -> str:
    return "".join(f"# {line}\n" for line in cfg.echo())


def cmd_run(cfg: ExperimentConfig, emit=print) -> list[ResultRow]:
    """Train ``cfg.method`` over ``cfg.sequence`` and write checkpoints and reports."""
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from None
    specs = cfg.model_specs()
    val = {s.name: _load(cfg, s.name, "val") for s in specs}
    # training data is read when its step starts and released afterwards
    train = {s.name: (lambda n=s.name: _load(cfg, n, "train")) for s in specs}

    reference: dict = {}
    if cfg.reference == "single_task":
        for s in specs:
            reports, _ = run_method("single_task", [s], train, val, cfg.train, cfg.model)
            reference[s.name] = reports[0].miou[s.name]
            emit(f"reference single_task {s.name}: mIoU {reference[s.name]:.2f}")

    def save(step, model, report):
        checkpoint_save(model, out / f"step_{step}.mdil",
                        extra={"method": cfg.method, "step": step, "config": cfg.raw})
        emit(f"{cfg.method} step {step} ({report.domain}): "
             + " ".join(f"{d}={v:.2f}" for d, v in report.miou.items()))

    reports, model = run_method(cfg.method, specs, train, val, cfg.train, cfg.model, on_step=save)
    if METHODS[cfg.method].joint:
        save(1, model, reports[0])

    step_rows = []
    for r in reports:
        step_rows += result_rows(cfg.method, r.step, r.miou, reference or None)
    final = reports[-1]
    rows = [ResultRow("single_task", 1, d, v) for d, v in reference.items()]
    rows += result_rows(cfg.method, final.step, final.miou, reference or None)

    echo = _echo_block(cfg)
    (out / "steps.csv").write_text(echo + render_csv(step_rows), encoding="utf-8")
    (out / "report.csv").write_text(echo + render_csv(rows), encoding="utf-8")
    losses = "".join(
        f"# loss step {r.step} epoch {i + 1}: " + " ".join(f"{k}={v:.6f}" for k, v in e.items()) + "\n"
        for r in reports for i, e in enumerate(r.epoch_losses))
    notes = "".join(f"# note: {r.note}\n" for r in reports if r.note)
    table = render_table(rows)
    (out / "report.txt").write_text(table + "\n" + notes + losses + echo, encoding="utf-8")
    emit(table.rstrip())
    return rows


# eval -------------------------------------------------------------------------

def cmd_eval(checkpoint: str, domain: str, data_root: str, emit=print) -> dict:
    try:
        model = checkpoint_load(checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {checkpoint}: {exc.strerror}") from None
    if domain not in model.domain_names:
        raise DataError(f"domain {domain!r} is not in {checkpoint} (has {model.domain_names})")
    spec = model.domains[model.domain_index(domain)]
    try:
        ds = load_dataset(data_root, domain, "val")
    except (DataFormatError, OSError) as exc:
        raise DataError(str(exc)) from None
    if tuple(ds.classes) != tuple(spec.classes):
        raise DataError(f"dataset classes {list(ds.classes)} do not match checkpoint {list(spec.classes)}")
    cm = ConfusionMatrix(spec.num_classes)
    for start in range(0, len(ds), 16):
        x, y = ds.batch(range(start, min(start + 16, len(ds))))
        accumulate_confusion(cm, model.predict(x.astype(model.dtype), domain), y)
    iou, m = miou(cm)
    for name, v in zip(spec.classes, iou):
        emit(f"{name:>12s}  {'n/a' if v != v else f'{100 * v:.2f}'}")
    emit(f"{'mIoU':>12s}  {100 * m:.2f}")
    return {"domain": domain, "miou": round(100 * m, 6), "iou": iou}


# report -------------------------------------------------------------------------

def cmd_report(run_dirs: Sequence[str], out: Optional[str], emit=print) -> list[ResultRow]:
    rows, echoes = [], []
    for d in run_dirs:
        path = Path(d) / "report.csv"
        try:
            text = path.read_text(encoding="utf-8")
        except OSError:
            raise DataError(f"missing {path}") from None
        body = "".join(line + "\n" for line in text.splitlines() if not line.startswith("#"))
        echoes.append("".join(line + "\n" for line in text.splitlines() if line.startswith("#")))
        try:
            new = parse_csv(body)
        except (ValueError, StopIteration) as exc:
            raise DataError(f"{path}: {exc}") from None
        seen = {(r.method, r.domain) for r in rows}
        rows += [r for r in new if (r.method, r.domain) not in seen]
    if not rows:
        raise DataError("no result rows found")
    table = render_table(rows)
    emit(table.rstrip())
    if out:
        o = Path(out)
        o.mkdir(parents=True, exist_ok=True)
        (o / "report.txt").write_text(table, encoding="utf-8")
        (o / "report.csv").write_text(render_csv(rows), encoding="utf-8")
    return rows


# entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdil", description="Multi-domain incremental segmentation experiments.")
    p.add_argument("--version", action="version", version=f"mdil {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-domains", help="write the synthetic datasets")
    g.add_argument("--config")
    g.add_argument("--out", help="dataset root (overrides data_root)")

    r = sub.add_parser("run", help="train a method over the domain sequence")
    r.add_argument("--config")
    r.add_argument("--baseline", choices=KINDS, help="run a baseline instead of the configured method")
    r.add_argument("--out", help="run directory (overrides out)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on one domain's validation split")
    e.add_argument("checkpoint")
    e.add_argument("domain")
    e.add_argument("--config")
    e.add_argument("--data-root")

    rp = sub.add_parser("report", help="merge report.csv files into one table")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--out")

    s = sub.add_parser("selftest", help="run built-in correctness checks")
    s.add_argument("--inject-fault", metavar="OP", help="corrupt OP's gradient (tests the harness)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-domains":
            cmd_gen_domains(load_config(args.config, {"data_root": args.out} if args.out else None))
        elif args.command == "run":
            overrides = {}
            if args.baseline:
                overrides["method"] = args.baseline
            if args.out:
                overrides["out"] = args.out
            cmd_run(load_config(args.config, overrides))
        elif args.command == "eval":
            root = args.data_root or load_config(args.config).data_root
            cmd_eval(args.checkpoint, args.domain, root)
        elif args.command == "report":
            cmd_report(args.runs, args.out)
        elif args.command == "selftest":
            from mdil.selftest import run_selftest
            if not run_selftest(args.inject_fault):
                return EXIT_CHECK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DataFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
