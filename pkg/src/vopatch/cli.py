"""``vopatch`` command line: dataset generation, attacks, evaluation, reports.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks as at
from . import harness as hs
from . import renderer as rd

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vopatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_, out_required=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="experiment configuration (YAML or JSON)")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override every seed in the configuration")
        sp.add_argument("--jobs", type=int, help="maximum worker processes")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("generate-data", "render the trajectory dataset")
    add("attack", "optimize patches (in-sample or cross-validated, per the config setting)")
    add("evaluate", "evaluate saved patches and baselines on the dataset")
    add("closed-loop", "closed-loop navigation runs with saved patches")
    rep = add("report", "re-render charts from a saved report.csv")
    rep.add_argument("run_dir", type=Path, help="directory holding report/report.csv")
    add("gradcheck", "finite-difference check of the autodiff ops and the full pipeline", out_required=False)
    return p


def _config(args) -> hs.ExperimentConfig:
    cfg = hs.ExperimentConfig.load(args.config) if args.config else hs.ExperimentConfig.from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.jobs is not None:
        if args.jobs < 1:
            raise hs.ConfigError("--jobs must be >= 1")
        cfg.data["jobs"] = args.jobs
    return cfg


def _generate(cfg, out: Path) -> None:
    spec = cfg.dataset_spec()
    seed = int(cfg.data["dataset"]["seed"])
    trajs = rd.generate_dataset(rd.scene_for(spec), spec, seed)
    rd.save_dataset(trajs, spec, out, seed)
    hs.write_manifest(out, cfg, "generate-data")


def _attack(cfg, out: Path) -> None:
    if cfg.data["setting"] == "closed_loop":
        raise hs.ConfigError("attack needs setting in_sample or out_of_sample")
    result = hs.run(cfg, out)
    for method in result.report.methods:
        print(f"{method:28s} final mean {result.report.final_mean(method):.4f} m")


def _evaluate(cfg, out: Path) -> None:
    trajs, _, _ = hs.load_or_generate_dataset(cfg)
    vo = cfg.make_vo(hs.trajs_intrinsics(cfg, trajs))
    patches = hs.closed_loop_patches(cfg)
    dims = next(iter(patches.values())).shape[1:] if patches else tuple(cfg.data["attack"]["patch_dims"])
    best = max(patches, key=lambda m: float(np.mean(at.prefix_deviations(vo, trajs, patches[m])[:, -1])), default=None)
    deviations = {n: at.prefix_deviations(vo, trajs, p) for n, p in hs._baseline_patches(
        cfg, dims, patches[best] if best else None).items()}
    deviations.update({n: at.prefix_deviations(vo, trajs, p) for n, p in patches.items()})
    report = hs.DeviationReport.from_deviations(hs._ordered(deviations), hs._path_lengths(trajs),
                                                tags={"best": best})
    hs.emit_report(report, out / "report")
    hs.write_manifest(out, cfg, "evaluate")
    for method in report.methods:
        print(f"{method:28s} final mean {report.final_mean(method):.4f} m")


def _closed_loop(cfg, out: Path) -> None:
    result = hs.run_closed_loop(cfg, out_dir=out)
    for method in result.report.methods:
        print(f"{method:28s} final mean {result.report.final_mean(method):.4f} m")


def _report(args, cfg, out: Path) -> None:
    src = args.run_dir / "report" / "report.csv"
    if not src.exists():
        raise FileNotFoundError(f"no report at {src}")
    hs.emit_report(hs.load_report_csv(src), out)
    hs.write_manifest(out, cfg, "report", {"source": str(args.run_dir)})


def _gradcheck(cfg, out) -> None:
    res = hs.gradient_check(int(cfg.data["attack"]["seed"]))
    print(f"max relative error, ops:     {res['ops_max']:.3e}")
    print(f"max relative error, pipeline: {res['pipeline_error']:.3e}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(res, indent=2, sort_keys=True))
        hs.write_manifest(out, cfg, "gradcheck")


def main(argv=None) -> int:
    parser = _parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
    except hs.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "generate-data":
            _generate(cfg, args.out)
        elif args.command == "attack":
            _attack(cfg, args.out)
        elif args.command == "evaluate":
            _evaluate(cfg, args.out)
        elif args.command == "closed-loop":
            _closed_loop(cfg, args.out)
        elif args.command == "report":
            _report(args, cfg, args.out)
        else:
            _gradcheck(cfg, args.out)
    except hs.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
