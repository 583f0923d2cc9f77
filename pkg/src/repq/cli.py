"""``repq`` command line: run experiments, check invariants, count multiplies.

Exit codes: 0 success, 1 failed invariants or diverged training, 2 bad usage or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import report
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import Dataset, load_folder, synthetic_shapes
from .flops import layer_costs, step_costs
from .model import build_model
from .trainer import (FP_BITS, RunMetrics, TrainingDiverged, convert_for_qat, save_checkpoint,
                      train_fp, train_qat)
from .verify import SABOTAGE, pointwise_ratio, run_checks

log = logging.getLogger("repq")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "folder":
        return load_folder(ds.path, ds.eval_fraction)
    return (synthetic_shapes(ds.n_train, seed=ds.seed, noise=ds.noise),
            synthetic_shapes(ds.n_eval, seed=ds.seed + 1, noise=ds.noise))


def _fp_model(cfg: ExperimentConfig, strategy, seed: int, train: Dataset):
    n = cfg.n_layers
    return build_model(cfg.model, strategy.fp_topologies(n), seed, train.images.shape[-1],
                       train.num_classes, strategy.layer_bn_modes(n), bn_momentum=cfg.fp.bn_momentum)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> list[dict]:
    """FP stage, then one QAT run per bit-width.  Returns summary rows."""
    train, evalset = load_data(cfg)
    strategy = cfg.strategy_config()
    metrics = RunMetrics(seed)
    base = dict(model=cfg.model, strategy=strategy.label, bn_mode=strategy.bn_mode, seed=seed)

    ck = train_fp(_fp_model(cfg, strategy, seed, train), train, cfg.fp, seed, evalset, metrics,
                  fp_stage=strategy.fp_stage)
    save_checkpoint(ck, out / f"fp_seed{seed}.npz")
    rows = [dict(base, bits=FP_BITS, metric=metrics.best("fp"))]
    log.info("seed %d FP best eval acc %.4f", seed, rows[0]["metric"])

    for bits in cfg.bits:
        stage = f"qat{bits}"
        model = convert_for_qat(ck, strategy, bits, seed, train.images.shape[-1], train.num_classes,
                                bn_momentum=cfg.fp.bn_momentum)
        qck, _ = train_qat(model, train, cfg.qat_stage(), seed, evalset, metrics, stage=stage)
        save_checkpoint(qck, out / f"{stage}_seed{seed}.npz")
        rows.append(dict(base, bits=bits, metric=metrics.best(stage)))
        log.info("seed %d %d-bit best eval acc %.4f", seed, bits, rows[-1]["metric"])

    metrics.write_jsonl(out / f"metrics_seed{seed}.jsonl")
    report.plot_curves(metrics.records, out / f"curves_seed{seed}.png", f"{cfg.name} (seed {seed})")
    return rows


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, out: Path | None = None) -> list[dict]:
    out = Path(out) if out is not None else cfg.resolved_output_dir() / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cfg.seeds))) as pool:
            results = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds, [out] * len(cfg.seeds)))
    else:
        results = [run_seed(cfg, s, out) for s in cfg.seeds]
    rows = [r for res in results for r in res]
    report.write_csv(rows, out / "summary.csv")
    report.plot_summary(rows, out / "summary.png", cfg.name)
    return rows


def flops_report(cfg: ExperimentConfig, out: Path | None = None, batch: int | None = None) -> dict:
    """Per-layer BN-statistic multiplies and whole-step totals, exact fold vs estimate."""
    out = Path(out) if out is not None else cfg.resolved_output_dir() / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_data(cfg)
    batch = batch or cfg.fp.batch_size
    x, labels = train.images[:batch], train.labels[:batch]
    strategy = cfg.strategy_config()
    model = _fp_model(cfg, strategy, cfg.seeds[0], train)
    costs = layer_costs(model, x)
    rows = [dict(layer=c.layer, topology=c.topology, in_shape="x".join(map(str, c.in_shape)),
                 out_channels=c.out_channels, exact=c.exact, estimate=c.estimate, ratio=c.ratio)
            for c in costs]
    total = dict(layer="total", topology="", in_shape="", out_channels="",
                 exact=sum(r["exact"] for r in rows), estimate=sum(r["estimate"] for r in rows))
    total["ratio"] = total["estimate"] / total["exact"]
    columns = ("layer", "topology", "in_shape", "out_channels", "exact", "estimate", "ratio")
    report.write_csv(rows + [total], out / "flops.csv", columns)
    report.plot_flops(rows, out / "flops.png")
    step_exact = step_costs(model, x, labels, "exact_fold")
    step_est = step_costs(model, x, labels, "estimate")
    summary = dict(batch=batch, stats_exact=total["exact"], stats_estimate=total["estimate"],
                   stats_ratio=total["ratio"], step_exact=step_exact, step_estimate=step_est,
                   step_ratio=step_est / step_exact,
                   pointwise_in16_out64=pointwise_ratio(64), pointwise_in16_out1=pointwise_ratio(1))
    (out / "flops.json").write_text(json.dumps(summary, indent=2) + "\n")
    return dict(layers=rows, total=total, **summary)


# --------------------------------------------------------------------------
# commands

def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seeds:
        cfg.seeds = args.seeds
    t0 = time.perf_counter()
    try:
        rows = run_experiment(cfg, args.jobs, args.output)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for r in rows:
        bits = "FP" if r["bits"] == FP_BITS else f"{r['bits']}-bit"
        print(f"{r['strategy']:<11} {bits:>6}  seed {r['seed']}  acc {r['metric']:.4f}")
    print(f"done in {time.perf_counter() - t0:.0f} s")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(args.sabotage, args.only)
    if args.json:
        print(json.dumps({"sabotage": args.sabotage, "results": results,
                          "passed": all(r["passed"] for r in results)}, indent=2))
    else:
        for r in results:
            print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']:<22} {r['detail']}")
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_FAIL


def cmd_flops(args) -> int:
    rep = flops_report(load_config(args.config), args.output, args.batch)
    print(f"{'layer':<6}{'topology':<15}{'input':<14}{'exact':>14}{'estimate':>12}{'ratio':>9}")
    for r in rep["layers"] + [rep["total"]]:
        print(f"{r['layer']!s:<6}{r['topology']:<15}{r['in_shape']:<14}{r['exact']:>14,}"
              f"{r['estimate']:>12,}{r['ratio']:>9.4f}")
    print(f"training step (batch {rep['batch']}): exact fold {rep['step_exact']:,} "
          f"multiplies, estimate {rep['step_estimate']:,} (ratio {rep['step_ratio']:.3f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="FP training, conversion and QAT for every seed and bit-width")
    r.add_argument("config", help="YAML file or bundled config name")
    r.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel processes")
    r.add_argument("--output", type=Path, help="output directory (default <output_dir>/<name>)")
    r.add_argument("--seeds", type=int, nargs="+", help="override the config's seed list")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--json", action="store_true", help="machine-readable report")
    v.add_argument("--sabotage", choices=sorted(SABOTAGE), help="inject a known fault (negative control)")
    v.add_argument("--only", nargs="+", help="run only these checks")
    v.set_defaults(func=cmd_verify)

    f = sub.add_parser("flops", help="multiply counts of exact vs estimated BN statistics")
    f.add_argument("config", help="YAML file or bundled config name")
    f.add_argument("--output", type=Path, help="output directory (default <output_dir>/<name>)")
    f.add_argument("--batch", type=int, help="batch size (default: the config's)")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
