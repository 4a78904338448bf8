"""Command-line entry point: ``pbnet {train,gradcheck,bench} --config PATH``.

Every failure prints one line ``error: <reason>: <detail>`` on stderr and
exits with a nonzero status.  Reasons are ``config``, ``certificate``,
``io``, ``numerics`` and ``gradcheck``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load, parse_override
from .fixed_point import DivergenceError
from .layers import CertificateError
from .network import LayerError

EXIT_CODES = {"gradcheck": 1, "config": 2, "certificate": 3, "io": 4, "numerics": 5}
DEFAULT_OUT = "pbnet-out"


class CliFailure(Exception):
    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbnet", description="Unrolled physics-based networks with memory-efficient gradients.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train an application and write log.csv and summary.json"),
        ("gradcheck", "finite-difference and engine-equivalence checks"),
        ("bench", "stored-state and operator counters per engine and depth"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", default=None, help=f"output directory (train defaults to ./{DEFAULT_OUT})")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="replace a config entry; VALUE is parsed as JSON when possible")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--shadow-diagnostics", action="store_true",
                       help="compare reverse-recalculated states with a stored run (train only)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    overrides = dict(parse_override(item) for item in args.override)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load(args.config, overrides)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _json_text(data) -> str:
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def _write(out: Path, name: str, text: str) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliFailure("io", f"cannot write {out / name}: {exc.strerror}") from None


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def cmd_train(args, cfg: ExperimentConfig) -> int:
    from .training import CSV_HEADER, train

    out = Path(args.out or DEFAULT_OUT)
    _write(out, "config.json", _json_text(cfg.as_dict()))
    log = train(cfg, shadow=args.shadow_diagnostics)
    _write(out, "log.csv", _csv_text(CSV_HEADER, (r.as_tuple() for r in log.rows)))
    if args.shadow_diagnostics:
        rows = []
        for step, entry in enumerate(log.residual_trace):
            for layer, value in sorted(entry["residuals"].items()):
                rows.append((entry["epoch"], step, layer, value))
        _write(out, "residuals.csv", _csv_text(("epoch", "step", "layer", "residual"), rows))
    summary = {
        "command": "train",
        "application": cfg.application,
        "engine": cfg.engine,
        "epochs": cfg.epochs,
        "initial_test_loss": log.rows[0].test_loss,
        "final_train_loss": log.final_train_loss,
        "final_test_loss": log.final_test_loss,
        "peak_stored_states": max(r.peak_stored_states for r in log.rows),
        "operator_applications": sum(r.operator_applications for r in log.rows),
        "certificate": log.certificate,
        "config": cfg.as_dict(),
        "timestamp": _timestamp(),
    }
    _write(out, "summary.json", _json_text(summary))
    print(f"final test loss {log.final_test_loss!r}")
    return 0


def cmd_gradcheck(args, cfg: ExperimentConfig) -> int:
    from .diagnostics import GRADCHECK_HEADER, failures, gradcheck_app, summarize

    rows = summarize(gradcheck_app(cfg))
    text = _csv_text(GRADCHECK_HEADER, (r.as_tuple() for r in rows))
    if args.out:
        _write(Path(args.out), "gradcheck.csv", text)
    sys.stdout.write(text)
    bad = failures(rows)
    if bad:
        # a failing per-layer check localizes the fault better than the worst pipeline error
        layer_bad = [r for r in bad if r.check == "layer-vjp-vs-fd"]
        first = layer_bad[0] if layer_bad else max(bad, key=lambda r: r.rel_err)
        raise CliFailure("gradcheck", f"{len(bad)} check(s) failed; {first.check} {first.target} "
                                      f"rel err {first.rel_err:.3g} > {first.threshold:g}")
    return 0


def cmd_bench(args, cfg: ExperimentConfig) -> int:
    from .diagnostics import BENCH_HEADER, bench_app

    text = _csv_text(BENCH_HEADER, (r.as_tuple() for r in bench_app(cfg)))
    if args.out:
        _write(Path(args.out), "bench.csv", text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"train": cmd_train, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except CliFailure as exc:
        reason, detail = exc.reason, exc.detail
    except ConfigError as exc:
        reason, detail = "config", str(exc)
    except CertificateError as exc:
        reason, detail = "certificate", str(exc)
    except LayerError as exc:
        if isinstance(exc.cause, CertificateError):
            reason = "certificate"
        else:
            reason = "numerics"
        detail = str(exc)
    except (DivergenceError, FloatingPointError) as exc:
        reason, detail = "numerics", str(exc)
    except OSError as exc:
        reason, detail = "io", str(exc)
    print(f"error: {reason}: {_one_line(detail)}", file=sys.stderr)
    return EXIT_CODES[reason]


if __name__ == "__main__":
    sys.exit(main())
