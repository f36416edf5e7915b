"""Command-line entry point: plgc <subcommand> [--config F] [--out D] ..."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .graph import generate_sbm, save_graph
from .harness import (
    PipelineError,
    atomic_write_text,
    derive_seed,
    run_noise_sweep,
    run_pipeline,
    stage_backbone,
    stage_condense,
    stage_eval,
    stage_finetune,
    stage_pretrain,
    _sbm_config,
)
from .theory import TheoremParams, lattice_centers, sample_complexity, validate_theorem

log = logging.getLogger("plgc")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    raw = os.environ.get("PLGC_LOG", "info").lower()
    if raw not in _LOG_LEVELS:
        raise ConfigError(f"PLGC_LOG must be one of {sorted(_LOG_LEVELS)}, got {raw!r}")
    logging.basicConfig(level=_LOG_LEVELS[raw], format="%(levelname)s %(name)s: %(message)s")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plgc", description=__doc__)
    parser.add_argument("--config", type=Path, default=None, help="flat key = value config file")
    parser.add_argument("--out", type=Path, default=Path("plgc_out"), help="artifact directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed list")
    parser.add_argument("--workers", type=int, default=None, help="parallel sweep cells")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen-sbm", "write a synthetic block-model bundle to --out"),
        ("pretrain", "pseudo-label training for every seed/source"),
        ("condense", "condense every pretrained source"),
        ("backbone", "reconstruct the backbone from condensed sets"),
        ("finetune", "fit the prediction head on the frozen backbone"),
        ("eval", "evaluate and write results.jsonl"),
        ("pipeline", "run all stages end to end"),
        ("sweep-noise", "accuracy-vs-noise grid with CSV + SVG"),
        ("validate-theory", "Monte Carlo check of the concentration theorem"),
    ):
        sub.add_parser(name, help=help_text)
    return parser


def _theorem_params(cfg: ExperimentConfig) -> TheoremParams:
    import numpy as np

    s = sample_complexity(
        cfg.theory_sigma,
        cfg.theory_beta,
        cfg.theory_separation,
        cfg.theory_d,
        cfg.theory_k,
        cfg.theory_delta,
    )
    return TheoremParams(
        sigma=cfg.theory_sigma,
        delta=cfg.theory_delta,
        beta=cfg.theory_beta,
        centers=lattice_centers(cfg.theory_k, cfg.theory_d, cfg.theory_separation),
        s=np.full(cfg.theory_k, s, dtype=np.int64),
    )


def _cmd_validate_theory(cfg: ExperimentConfig, out: Path) -> int:
    report = validate_theorem(
        _theorem_params(cfg),
        trials=cfg.theory_trials,
        base_seed=cfg.theory_base_seed,
        noise_scale=cfg.theory_noise_scale,
    )
    atomic_write_text(out / "theory_report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["seed", "max_deviation", "concentration_holds", "interior_total",
         "interior_correct", "min_separation", "max_normalized_deviation"]
    )
    for row in report.trial_summaries:
        writer.writerow(
            [row["seed"], repr(row["max_deviation"]), row["concentration_holds"],
             row["interior_total"], row["interior_correct"],
             repr(row["min_separation"]), repr(row["max_normalized_deviation"])]
        )
    atomic_write_text(out / "theory_deviations.csv", buf.getvalue())
    log.info(
        "theorem validation %s: violation rate %.4f (threshold %.4f)",
        "PASSED" if report.passed else "FAILED",
        report.concentration_violation_rate,
        report.concentration_threshold,
    )
    return 0 if report.passed else 1


def _cmd_gen_sbm(cfg: ExperimentConfig, out: Path) -> int:
    seed = cfg.seeds[0]
    g = generate_sbm(_sbm_config(cfg), derive_seed(seed, 0))
    save_graph(g, out)
    log.info("wrote SBM bundle (%d nodes, %d edges) to %s", g.num_nodes, g.num_edges, out)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seeds = [args.seed]
        if args.workers is not None:
            cfg.workers = args.workers
        cfg.validate()
        out: Path = args.out
        out.mkdir(parents=True, exist_ok=True)

        if args.command == "gen-sbm":
            return _cmd_gen_sbm(cfg, out)
        if args.command == "validate-theory":
            return _cmd_validate_theory(cfg, out)
        if args.command == "sweep-noise":
            report = run_noise_sweep(cfg, out)
            failed = [c for c in report.cells if c.value is None]
            log.info("sweep finished: %d cells, %d failed", len(report.cells), len(failed))
            return 0 if not failed else 1
        if args.command == "pipeline":
            reports = run_pipeline(cfg, out)
            for r in reports:
                log.info("seed %d: %s %s = %.4f", r.seed, r.task, r.metric, r.value)
            return 0
        stage = {
            "pretrain": stage_pretrain,
            "condense": stage_condense,
            "backbone": stage_backbone,
            "finetune": stage_finetune,
        }.get(args.command)
        if stage is not None:
            for seed in cfg.seeds:
                stage(cfg, out, seed)
            return 0
        if args.command == "eval":
            reports = [stage_eval(cfg, out, seed) for seed in cfg.seeds]
            atomic_write_text(
                out / "results.jsonl", "".join(r.to_json() + "\n" for r in reports)
            )
            for r in reports:
                log.info("seed %d: %s %s = %.4f", r.seed, r.task, r.metric, r.value)
            return 0
        raise ConfigError(f"unknown command {args.command!r}")
    except PipelineError as exc:
        payload = {"stage": exc.stage, "error": str(exc.cause)}
        try:
            atomic_write_text(args.out / "error.json", json.dumps(payload, sort_keys=True) + "\n")
        except OSError:
            pass
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        print(f"plgc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
