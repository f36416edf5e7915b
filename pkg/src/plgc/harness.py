"""Pipeline orchestration: pretrain, condense, backbone, fine-tune, evaluate.

Every stage persists its artifacts under the output directory and reads its
inputs back from disk, so each stage is independently resumable and a
resumed run is byte-identical to a fresh one. Seeds for every randomized
step are derived from (run seed, stage tag, indices) so one config fully
determines every number produced.

Layout per run seed s:
    out/seed_<s>/dataset/              SBM bundle (only when generated)
    out/seed_<s>/source_<i>/           pseudo-label artifacts
    out/seed_<s>/source_<i>/condensed/ condensed features + prototypes
    out/seed_<s>/backbone/             reconstructed encoder
    out/seed_<s>/head.bin              fine-tuned prediction head
    out/results.jsonl                  one evaluation record per seed
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .condense import condense, init_condensed, load_condensed, reconstruct_backbone, save_condensed, supervised_baseline_condense
from .config import ExperimentConfig, config_snapshot, k_from_ratio
from .encoder import EncoderParams
from .downstream import (
    EvalReport,
    evaluate_link,
    evaluate_node,
    finetune_link_head,
    finetune_node_head,
    load_head,
    sample_few_shot,
    save_head,
    train_supervised_encoder,
)
from .encoder import EncoderConfig, identity_adjacency, load_encoder, save_encoder
from .graph import Graph, SbmConfig, generate_sbm, inject_label_noise, load_graph, partition_sources, save_graph, split_edges
from .pseudo import SinkhornConfig, load_pseudo_result, save_pseudo_result, train_pseudo_labels

log = logging.getLogger("plgc")

# stage tags for seed derivation; values are arbitrary but frozen
_S_DATA, _S_PRETRAIN, _S_PARTITION, _S_BACKBONE, _S_FEWSHOT, _S_SPLIT, _S_HEAD, _S_NOISE, _S_BASE = range(9)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from (run seed, stage tag, indices...)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0] >> 1)


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _sbm_config(cfg: ExperimentConfig) -> SbmConfig:
    return SbmConfig(
        blocks=cfg.sbm_blocks,
        nodes_per_block=cfg.sbm_nodes_per_block,
        p_in=cfg.sbm_p_in,
        p_out=cfg.sbm_p_out,
        feature_dim=cfg.sbm_feature_dim,
        center_separation=cfg.sbm_center_separation,
        feature_noise=cfg.sbm_feature_noise,
    )


def _sinkhorn_config(cfg: ExperimentConfig, num_nodes: int, k: int) -> SinkhornConfig:
    # full-graph batches up to 5000 nodes; beyond that, batches of roughly
    # 4096 nodes rounded to a multiple of K
    batch = None if num_nodes <= 5000 else k * max(1, 4096 // k)
    return SinkhornConfig(
        epsilon=cfg.sinkhorn_epsilon, iters=cfg.sinkhorn_iters, batch_size=batch
    )


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


def load_or_generate_dataset(cfg: ExperimentConfig, out: Path, seed: int) -> Graph:
    """SBM bundles are generated per run seed; explicit bundles are shared."""
    if cfg.dataset_dir is not None:
        return load_graph(cfg.dataset_dir)
    bundle = _seed_dir(out, seed) / "dataset"
    if cfg.resume and (bundle / "meta.json").exists():
        return load_graph(bundle)
    g = generate_sbm(_sbm_config(cfg), derive_seed(seed, _S_DATA))
    save_graph(g, bundle)
    return g


def _sources(cfg: ExperimentConfig, g: Graph, seed: int):
    if cfg.num_sources == 1:
        return [(g, np.arange(g.num_nodes))]
    parts = partition_sources(g, cfg.num_sources, derive_seed(seed, _S_PARTITION))
    return [(p.graph, p.node_ids) for p in parts]


def stage_pretrain(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    g = load_or_generate_dataset(cfg, out, seed)
    for i, (part, _) in enumerate(_sources(cfg, g, seed)):
        target = _seed_dir(out, seed) / f"source_{i}"
        if cfg.resume and (target / "prototypes.tsv").exists():
            log.info("seed %d source %d: pseudo artifacts exist, skipping", seed, i)
            continue
        k = k_from_ratio(cfg.ratio, part.num_nodes)
        log.info("seed %d source %d: pseudo-label training, K=%d", seed, i, k)
        res = train_pseudo_labels(
            part,
            k,
            epochs=cfg.pretrain_epochs,
            lr_encoder=cfg.lr_encoder,
            lr_bank=cfg.lr_bank,
            sinkhorn=_sinkhorn_config(cfg, part.num_nodes, k),
            edge_drop=cfg.edge_drop,
            feature_mask=cfg.feature_mask,
            tau=cfg.tau,
            hidden_dim=cfg.hidden_dim,
            embed_dim=cfg.embed_dim,
            refine_steps=cfg.refine_steps,
            seed=derive_seed(seed, _S_PRETRAIN, i),
        )
        save_pseudo_result(res, target)


def stage_condense(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    g = load_or_generate_dataset(cfg, out, seed)
    for i, (part, _) in enumerate(_sources(cfg, g, seed)):
        src_dir = _seed_dir(out, seed) / f"source_{i}"
        target = src_dir / "condensed"
        if cfg.resume and (target / "meta.json").exists():
            log.info("seed %d source %d: condensed artifacts exist, skipping", seed, i)
            continue
        res = load_pseudo_result(src_dir, part.num_nodes)
        init = init_condensed(part, res.q_full, res.bank.k)
        cg = condense(
            init, res.encoder, res.bank, steps=cfg.condense_steps, lr=cfg.condense_lr, source_id=i
        )
        log.info("seed %d source %d: condensation loss %.3e", seed, i, cg.final_loss)
        save_condensed(cg, target)


def stage_backbone(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    target = _seed_dir(out, seed) / "backbone"
    if cfg.resume and (target / "params.bin").exists():
        log.info("seed %d: backbone exists, skipping", seed)
        return
    sets = [
        load_condensed(_seed_dir(out, seed) / f"source_{i}" / "condensed")
        for i in range(cfg.num_sources)
    ]
    theta = reconstruct_backbone(
        sets,
        EncoderConfig(cfg.hidden_dim, cfg.embed_dim),
        epochs=cfg.backbone_epochs,
        lr=cfg.backbone_lr,
        seed=derive_seed(seed, _S_BACKBONE),
    )
    save_encoder(theta, target)


def _node_eval_indices(cfg: ExperimentConfig, g: Graph, seed: int):
    train_idx = sample_few_shot(
        g.labels, cfg.few_shot, derive_seed(seed, _S_FEWSHOT), num_classes=g.num_classes
    )
    labeled = np.flatnonzero(g.labels >= 0)
    test_idx = np.setdiff1d(labeled, train_idx)
    return train_idx, test_idx


def stage_finetune(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    g = load_or_generate_dataset(cfg, out, seed)
    backbone = load_encoder(_seed_dir(out, seed) / "backbone")
    head_seed = derive_seed(seed, _S_HEAD)
    if cfg.task == "node":
        train_idx, _ = _node_eval_indices(cfg, g, seed)
        head = finetune_node_head(backbone, g, train_idx, cfg.head_epochs, cfg.head_lr, head_seed)
    else:
        split = split_edges(g, derive_seed(seed, _S_SPLIT))
        head = finetune_link_head(backbone, g, split, cfg.head_epochs, cfg.head_lr, head_seed)
    save_head(head, _seed_dir(out, seed))


def stage_eval(cfg: ExperimentConfig, out: Path, seed: int) -> EvalReport:
    g = load_or_generate_dataset(cfg, out, seed)
    backbone = load_encoder(_seed_dir(out, seed) / "backbone")
    head = load_head(_seed_dir(out, seed))
    if cfg.task == "node":
        _, test_idx = _node_eval_indices(cfg, g, seed)
        report = evaluate_node(backbone, head, g, test_idx, seed=seed)
    else:
        split = split_edges(g, derive_seed(seed, _S_SPLIT))
        report = evaluate_link(backbone, head, g, split, seed=seed)
    report.config = config_snapshot(cfg)
    return report


_STAGES = (
    ("pretrain", stage_pretrain),
    ("condense", stage_condense),
    ("backbone", stage_backbone),
    ("finetune", stage_finetune),
)


def run_pipeline(cfg: ExperimentConfig, out: str | Path) -> list[EvalReport]:
    """Full per-seed pipeline; writes artifacts plus out/results.jsonl."""
    out = Path(out)
    reports = []
    for seed in cfg.seeds:
        for name, fn in _STAGES:
            try:
                fn(cfg, out, seed)
            except Exception as exc:  # noqa: BLE001 - stage boundary
                raise PipelineError(name, exc) from exc
        try:
            reports.append(stage_eval(cfg, out, seed))
        except Exception as exc:  # noqa: BLE001
            raise PipelineError("eval", exc) from exc
    lines = [r.to_json() for r in reports]
    atomic_write_text(out / "results.jsonl", "".join(line + "\n" for line in lines))
    return reports


# -- noise sweep ---------------------------------------------------------------


@dataclass
class SweepCell:
    noise_rate: float
    method: str
    seed: int
    value: float | None  # None = failed
    error: str | None = None


@dataclass
class SweepReport:
    cells: list[SweepCell]
    noise_rates: list[float]
    methods: list[str]
    seeds: list[int]

    def values(self, noise_rate: float, method: str) -> list[float]:
        return [
            c.value
            for c in self.cells
            if c.noise_rate == noise_rate and c.method == method and c.value is not None
        ]

    def mean_std(self, noise_rate: float, method: str) -> tuple[float, float]:
        vals = self.values(noise_rate, method)
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.std(vals))


@dataclass
class _SeedContext:
    """Noise-independent artifacts shared by all cells of one run seed."""

    graph: Graph
    backbone: EncoderParams  # the reconstructed PLGC backbone
    pseudo_encoder: EncoderParams  # theta', reused as the baseline's embedding model


def _prepare_seed(cfg: ExperimentConfig, out: Path, seed: int) -> _SeedContext:
    # PLGC condensation is label-free: one pretrain/condense/backbone pass
    # serves every noise level of this seed
    for name, fn in _STAGES[:3]:
        try:
            fn(cfg, out, seed)
        except Exception as exc:  # noqa: BLE001
            raise PipelineError(name, exc) from exc
    g = load_or_generate_dataset(cfg, out, seed)
    backbone = load_encoder(_seed_dir(out, seed) / "backbone")
    pseudo_encoder = load_encoder(_seed_dir(out, seed) / "source_0")
    return _SeedContext(g, backbone, pseudo_encoder)


def _clean_fewshot_indices(cfg: ExperimentConfig, g: Graph, noisy: np.ndarray, seed: int, noise_tag: int):
    """Few-shot clean subset: sampled among nodes whose labels survived the noise."""
    clean = np.flatnonzero((g.labels >= 0) & (noisy == g.labels))
    masked = np.full(g.num_nodes, -1, dtype=np.int64)
    masked[clean] = g.labels[clean]
    train_idx = sample_few_shot(
        masked, cfg.few_shot, derive_seed(seed, _S_FEWSHOT, noise_tag), num_classes=g.num_classes
    )
    labeled = np.flatnonzero(g.labels >= 0)
    test_idx = np.setdiff1d(labeled, train_idx)
    return train_idx, test_idx


def _eval_head_on(cfg, backbone, g, train_idx, test_idx, head_seed) -> float:
    head = finetune_node_head(backbone, g, train_idx, cfg.head_epochs, cfg.head_lr, head_seed)
    return evaluate_node(backbone, head, g, test_idx).value


def _run_cell(cfg: ExperimentConfig, ctx: _SeedContext, noise_rate: float, method: str, seed: int) -> float:
    g = ctx.graph
    noise_tag = int(round(noise_rate * 1000))
    noisy = inject_label_noise(
        g.labels, noise_rate, g.num_classes, derive_seed(seed, _S_NOISE, noise_tag)
    )
    train_idx, test_idx = _clean_fewshot_indices(cfg, g, noisy, seed, noise_tag)
    head_seed = derive_seed(seed, _S_HEAD, noise_tag)
    if method == "plgc":
        return _eval_head_on(cfg, ctx.backbone, g, train_idx, test_idx, head_seed)
    if method != "baseline":
        raise ValueError(f"unknown method {method!r}")
    # supervised-family pipeline: condense per-class means on the corrupted
    # labels, then train a fresh encoder on the labeled synthetic graph
    bcg = supervised_baseline_condense(
        g,
        noisy,
        ctx.pseudo_encoder,
        per_class=cfg.baseline_per_class,
        steps=cfg.baseline_steps,
        lr=cfg.baseline_lr,
        seed=derive_seed(seed, _S_BASE, noise_tag, 1),
    )
    rows = len(bcg.labels)
    base_backbone = train_supervised_encoder(
        identity_adjacency(rows),
        bcg.features,
        bcg.labels,
        np.arange(rows),
        g.num_classes,
        EncoderConfig(cfg.hidden_dim, cfg.embed_dim),
        epochs=cfg.baseline_encoder_epochs,
        lr=cfg.baseline_encoder_lr,
        seed=derive_seed(seed, _S_BASE, noise_tag, 2),
    )
    return _eval_head_on(cfg, base_backbone, g, train_idx, test_idx, head_seed)


def run_noise_sweep(cfg: ExperimentConfig, out: str | Path) -> SweepReport:
    """Accuracy-vs-noise grid over (noise_rate, method, seed); emits CSV + SVG.

    PLGC condenses once per seed (label-free); the supervised class-mean
    baseline re-condenses per noise level using the corrupted labels. Both
    fine-tune fresh heads on the same clean few-shot subset. Failed cells are
    recorded and the sweep continues.
    """
    out = Path(out)
    methods = ["plgc", "baseline"]
    contexts: dict[int, _SeedContext] = {}

    def prep(seed: int):
        contexts[seed] = _prepare_seed(cfg, out, seed)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(prep, cfg.seeds))
    else:
        for seed in cfg.seeds:
            prep(seed)

    grid = [
        (rate, method, seed)
        for rate in cfg.noise_rates
        for method in methods
        for seed in cfg.seeds
    ]

    def run(cell) -> SweepCell:
        rate, method, seed = cell
        try:
            value = _run_cell(cfg, contexts[seed], rate, method, seed)
            return SweepCell(rate, method, seed, value)
        except Exception as exc:  # noqa: BLE001 - cell boundary, sweep continues
            log.error("cell (%s, %s, %s) failed: %s", rate, method, seed, exc)
            return SweepCell(rate, method, seed, None, error=str(exc))

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            cells = list(pool.map(run, grid))
    else:
        cells = [run(cell) for cell in grid]

    report = SweepReport(cells, list(cfg.noise_rates), methods, list(cfg.seeds))
    atomic_write_text(out / "sweep.csv", sweep_csv(cfg, report))
    atomic_write_text(out / "sweep.svg", sweep_svg(report))
    return report


def sweep_csv(cfg: ExperimentConfig, report: SweepReport) -> str:
    """Per-cell rows plus the aggregate rows every plotted number comes from."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "task", "noise_rate", "method", "sources", "seed", "metric", "value"])
    name = cfg.dataset_name if cfg.dataset_dir is None else cfg.dataset_dir
    for c in report.cells:
        writer.writerow(
            [name, cfg.task, c.noise_rate, c.method, cfg.num_sources, c.seed,
             "accuracy", "failed" if c.value is None else repr(c.value)]
        )
    for rate in report.noise_rates:
        for method in report.methods:
            mean, std = report.mean_std(rate, method)
            for metric, value in (
                ("accuracy_mean", mean),
                ("accuracy_std", std),
                ("band_low", mean - std),
                ("band_high", mean + std),
            ):
                writer.writerow([name, cfg.task, rate, method, cfg.num_sources, "", metric, repr(value)])
    return buf.getvalue()


_SVG_COLORS = {"plgc": "#1f77b4", "baseline": "#d62728"}


def sweep_svg(report: SweepReport) -> str:
    """Line plot with mean +- std bands, no plotting dependency."""
    width, height = 640, 440
    left, right, top, bottom = 70, 20, 20, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    rates = report.noise_rates
    lo, hi = min(rates), max(rates)
    span = (hi - lo) or 1.0

    def x(rate):
        return left + (rate - lo) / span * plot_w

    def y(value):
        return top + (1.0 - min(max(value, 0.0), 1.0)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>',
    ]
    for tick in np.linspace(0.0, 1.0, 6):
        parts.append(
            f'<line x1="{left}" y1="{y(tick):.2f}" x2="{left + plot_w}" y2="{y(tick):.2f}" '
            f'stroke="#ddd"/>'
            f'<text x="{left - 8}" y="{y(tick) + 4:.2f}" text-anchor="end">{tick:.1f}</text>'
        )
    for rate in rates:
        parts.append(
            f'<line x1="{x(rate):.2f}" y1="{top + plot_h}" x2="{x(rate):.2f}" '
            f'y2="{top + plot_h + 5}" stroke="#333"/>'
            f'<text x="{x(rate):.2f}" y="{top + plot_h + 20}" text-anchor="middle">{rate:g}</text>'
        )
    parts.append(
        f'<text x="{left + plot_w / 2:.2f}" y="{height - 12}" text-anchor="middle">label noise rate</text>'
        f'<text x="18" y="{top + plot_h / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {top + plot_h / 2:.2f})">accuracy</text>'
    )
    for mi, method in enumerate(report.methods):
        color = _SVG_COLORS.get(method, "#555")
        stats = [report.mean_std(rate, method) for rate in rates]
        band_top = [(x(r), y(m + s)) for r, (m, s) in zip(rates, stats) if not np.isnan(m)]
        band_bot = [(x(r), y(m - s)) for r, (m, s) in zip(rates, stats) if not np.isnan(m)]
        if band_top:
            pts = " ".join(f"{px:.2f},{py:.2f}" for px, py in band_top + band_bot[::-1])
            parts.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
            line = " ".join(
                f"{x(r):.2f},{y(m):.2f}" for r, (m, _) in zip(rates, stats) if not np.isnan(m)
            )
            parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
            for r, (m, _) in zip(rates, stats):
                if not np.isnan(m):
                    parts.append(f'<circle cx="{x(r):.2f}" cy="{y(m):.2f}" r="3" fill="{color}"/>')
        ly = top + 16 + 18 * mi
        parts.append(
            f'<line x1="{left + 10}" y1="{ly}" x2="{left + 34}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
            f'<text x="{left + 40}" y="{ly + 4}">{method}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
