"""Command line entry point: ``geoshare {train,share,oracle,ablate,report}``.

Every subcommand writes a JSON report into ``--out`` plus a ``timing.json``
sidecar; wall times never enter the report itself, so reruns with the same
config and seed give byte-identical reports.

Exit codes: 0 success, 1 usage or configuration error, 2 oracle failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from . import autodiff as ad
from . import harness as hx
from .aligner import MODES, compute_bundles, geo_share
from .errors import ConfigurationError, GeoShareError, OracleFailure

EXIT_OK, EXIT_USAGE, EXIT_ORACLE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--mode", choices=MODES, help="overrides the alignment mode (main run and sweeps)")
    p.add_argument("--csv", action="store_true", help="also write flat CSV tables")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geoshare", description="Curvature-aligned cross-layer weight sharing on toy models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("train", help="generate data, train the toy model, save a checkpoint"))
    share = sub.add_parser("share", help="select bases and align weights")
    _common(share)
    share.add_argument("--checkpoint", type=Path, help="use these weights instead of training")
    _common(sub.add_parser("oracle", help="dense and exhaustive cross-checks"))
    ablate = sub.add_parser("ablate", help="t and beta sweeps")
    _common(ablate)
    ablate.add_argument("--t", type=int, nargs="+", help="t values (default: config t_sweep)")
    ablate.add_argument("--beta", type=float, nargs="+", help="beta values (default: config beta_sweep)")
    _common(sub.add_parser("report", help="full comparison against baselines"))
    return parser


def load_config(args) -> hx.ExperimentConfig:
    if args.config is None:
        config = hx.ExperimentConfig()
    else:
        try:
            raw = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        config = hx.ExperimentConfig.from_dict(raw)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.mode is not None:
        config = config.with_mode(args.mode)
    return config


def _write(out: Path, name: str, obj) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(hx.dumps(obj))
    return path


def _write_csv(out: Path, name: str, rows: list[dict]) -> None:
    if not rows:
        return
    out.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0])
    with open(out / name, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in row.items()})


def cmd_train(args, config):
    ctx = hx.prepare(config)
    ad.save_checkpoint(args.out / "checkpoint", ctx.spec, ctx.params, config.seed)
    report = {
        "schema_version": hx.SCHEMA_VERSION,
        "config": config.to_dict(),
        "training": ctx.training.summary(),
        "hashes": ctx.hashes(),
    }
    _write(args.out, "train.json", report)
    if args.csv:
        _write_csv(args.out, "train_trace.csv", ctx.training.trace)
    return EXIT_OK, ctx.timing


def cmd_share(args, config):
    params = None
    if args.checkpoint is not None:
        spec, params, _ = ad.load_checkpoint(args.checkpoint)
        if spec != config.model:
            raise ConfigurationError("checkpoint model spec differs from the config")
    ctx = hx.prepare(config, params)
    align = config.sharing.align
    t0 = time.perf_counter()
    src = ctx.hessian_source()
    bundles = compute_bundles(ctx.params, align, src)
    t1 = time.perf_counter()
    coloring, _, report = geo_share(ctx.params, ctx.bases, align, src, bundles=bundles, loss_fn=ctx.loss_fn)
    t2 = time.perf_counter()
    out = {
        "schema_version": hx.SCHEMA_VERSION,
        "config": config.to_dict(),
        "hashes": ctx.hashes(),
        "alignment": report.to_dict(),
    }
    _write(args.out, "share.json", out)
    (args.out / "coloring.json").write_text(
        coloring.to_json(config.sharing.rank, config.sharing.strategy, config.seed) + "\n"
    )
    if args.csv:
        _write_csv(args.out, "share_layers.csv", [{k: v for k, v in r.items() if k != "energies"} for r in report.layers])
    return EXIT_OK, dict(ctx.timing, eig_s=t1 - t0, selection_alignment_s=t2 - t1)


def cmd_oracle(args, config):
    t0 = time.perf_counter()
    report = hx.run_oracles(config)
    _write(args.out, "oracle.json", report)
    if args.csv:
        rows = [{"suite": k, "passed": v["passed"]} for k, v in report["suites"].items()]
        _write_csv(args.out, "oracle.csv", rows)
    code = EXIT_OK if report["passed"] else EXIT_ORACLE
    if code:
        failed = [k for k, v in report["suites"].items() if not v["passed"]]
        print(f"oracle failure: {', '.join(failed)}", file=sys.stderr)
    return code, {"oracle_s": time.perf_counter() - t0}


def cmd_ablate(args, config):
    t_values = tuple(args.t) if args.t else config.t_sweep
    beta_values = tuple(args.beta) if args.beta else config.beta_sweep
    if not t_values and not beta_values:
        raise ConfigurationError("nothing to sweep: give --t/--beta or t_sweep/beta_sweep in the config")
    ctx = hx.prepare(config)
    tables, timing = {}, dict(ctx.timing)
    for kind, values in (("t", t_values), ("beta", beta_values)):
        if values:
            rows, times = hx.ablate(ctx, kind, values, align=config.ablation_align)
            tables[kind] = rows
            timing[f"ablation_{kind}_s"] = times
            if args.csv:
                _write_csv(args.out, f"ablation_{kind}.csv", rows)
    report = {"schema_version": hx.SCHEMA_VERSION, "config": config.to_dict(), "hashes": ctx.hashes(), "ablation": tables}
    _write(args.out, "ablation.json", report)
    return EXIT_OK, timing


def cmd_report(args, config):
    report, timing = hx.run_experiment(config)
    _write(args.out, "report.json", report)
    if args.csv:
        rows = [
            {"method": name, **{k: m.get(k) for k in ("loss_before", "loss_after", "delta_loss", "compression_ratio", "automorphism_order")}}
            for name, m in report["methods"].items()
        ]
        _write_csv(args.out, "methods.csv", rows)
        for kind, table in report["ablation"].items():
            _write_csv(args.out, f"ablation_{kind}.csv", table)
    return EXIT_OK, timing


COMMANDS = {
    "train": cmd_train,
    "share": cmd_share,
    "oracle": cmd_oracle,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        code, timing = COMMANDS[args.command](args, config)
    except OracleFailure as exc:
        print(f"geoshare {args.command}: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (GeoShareError, ValueError, OSError) as exc:
        print(f"geoshare {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _write(args.out, "timing.json", timing)
    return code


if __name__ == "__main__":
    sys.exit(main())
