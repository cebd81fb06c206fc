"""Benchmark harness: per-instance metrics, aggregated tables, and fit reports.

Every (method, norm) cell of a run sees the same instances, the same
per-instance seeds, and the same precomputed target classes, so the only
varying factor is the method itself. Failed runs count against the success
rate but stay out of the mean/std aggregates; the raw per-instance records are
written alongside the aggregated table so every number is recomputable.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import ResultRow, export_image_grid, write_results
from .engine import METHODS, NORMS, CfResult, ExplainContext, SolverConfig, explain, extract_features
from .featstat import StatsFile, build_stats
from .nn import DenseNet, output_batch
from .targets import strategy1_distribution

RAW_HEADER = (
    "blackbox,method,norm,instance,seed,source_class,target_class,"
    "predicted_class,success,fe_dist,pixel_dist,opt_time"
)


@dataclass
class MetricRecord:
    method: str
    blackbox: str
    norm: str
    fe_dist: float
    pixel_dist: float
    opt_time: float
    success: bool
    instance: int
    seed: int
    source_class: int = -1
    target_class: int = -1
    predicted_class: int = -1

    def __post_init__(self):
        if self.fe_dist < 0 or self.pixel_dist < 0:
            raise ValueError("distances must be nonnegative")
        if self.opt_time <= 0:
            raise ValueError("wall time must be positive")


def _norm(v: np.ndarray, kind: str) -> float:
    if kind == "l1":
        return float(np.abs(v).sum())
    return float(np.sqrt(np.sum(v * v)))


def compute_metrics(result: CfResult, blackbox: DenseNet, norm: str,
                    blackbox_tag: str = "", instance: int = -1, seed: int = 0) -> MetricRecord:
    """Feature and pixel distances of one result under the chosen norm."""
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}")
    feats = extract_features(blackbox, np.stack([result.image, result.source_image]))
    return MetricRecord(
        method=result.method,
        blackbox=blackbox_tag,
        norm=norm,
        fe_dist=_norm(feats[0] - feats[1], norm),
        pixel_dist=_norm(result.image - result.source_image, norm),
        opt_time=result.wall_time,
        success=result.success,
        instance=instance,
        seed=seed,
        source_class=result.source_class,
        target_class=result.target_class,
        predicted_class=result.predicted_class,
    )


def aggregate(records: list[MetricRecord]) -> list[ResultRow]:
    """One row per (method, blackbox, norm); failures count only in suc_rate."""
    groups: dict[tuple[str, str, str], list[MetricRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.blackbox, r.norm), []).append(r)
    rows = []
    for (method, tag, norm), recs in sorted(groups.items()):
        ok = [r for r in recs if r.success]
        def stats_of(vals):
            if not vals:
                return float("nan"), float("nan")
            arr = np.array(vals)
            return float(arr.mean()), float(arr.std())
        fe_m, fe_s = stats_of([r.fe_dist for r in ok])
        px_m, px_s = stats_of([r.pixel_dist for r in ok])
        t_m, t_s = stats_of([r.opt_time for r in ok])
        rows.append(ResultRow(method, tag, norm, fe_m, fe_s, px_m, px_s, t_m, t_s,
                              len(ok) / len(recs)))
    return rows


def select_instances(blackbox: DenseNet, dataset, n: int, seed: int) -> np.ndarray:
    """Indices of n correctly-classified instances, round-robin over classes."""
    preds = np.argmax(output_batch(blackbox, dataset.images), axis=1)
    rng = np.random.default_rng(seed)
    per_class = []
    for c in range(blackbox.out_dim):
        idx = np.where((preds == c) & (dataset.labels == c))[0]
        per_class.append(rng.permutation(idx))
    picked = []
    round_i = 0
    while len(picked) < n:
        advanced = False
        for pool in per_class:
            if round_i < len(pool):
                picked.append(int(pool[round_i]))
                advanced = True
                if len(picked) == n:
                    break
        if not advanced:
            raise ValueError(f"only {len(picked)} correctly-classified instances available")
        round_i += 1
    return np.array(picked)


def _instance_seed(base: int, instance: int) -> int:
    return (base * 1_000_003 + instance * 7919 + 17) % (2**31 - 1)


def run_benchmark(
    contexts: dict[str, ExplainContext],
    test_data,
    out_dir,
    methods=METHODS,
    norms=NORMS,
    n_instances: int = 50,
    seed: int = 7,
    cfg: SolverConfig | None = None,
    grid_cols: int = 10,
) -> list[MetricRecord]:
    """Full comparison grid; writes CSVs, image grids, and a manifest."""
    cfg = cfg or SolverConfig()
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods: {bad}")
    missing = []
    for tag, ctx in contexts.items():
        for need in ("generator", "stats", "precision", "encoder", "decoder", "train_data"):
            if getattr(ctx, need) is None:
                missing.append(f"{tag}: {need}")
    if missing:
        raise ValueError("incomplete contexts: " + "; ".join(missing))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: list[MetricRecord] = []
    manifest: dict = {
        "seed": seed,
        "n_instances": n_instances,
        "methods": list(methods),
        "norms": list(norms),
        "config": {k: v for k, v in vars(cfg).items()},
        "blackboxes": {},
        "started": time.strftime("%Y-%m-%d %H:%M:%S"),
    }

    for tag, ctx in sorted(contexts.items()):
        indices = select_instances(ctx.blackbox, test_data, n_instances, seed)
        targets = {}
        for i in indices:
            choice = strategy1_distribution(int(test_data.labels[i]), ctx.stats)
            targets[int(i)] = choice.target_class
        manifest["blackboxes"][tag] = {
            "meta": ctx.blackbox.meta,
            "instances": [int(i) for i in indices],
            "targets": {str(k): v for k, v in targets.items()},
        }

        grid_images: dict[str, list[np.ndarray]] = {m: [] for m in methods}
        originals: list[np.ndarray] = []
        for pos, i in enumerate(indices):
            x = test_data.images[i]
            if pos < grid_cols:
                originals.append(x)
            iseed = _instance_seed(seed, int(i))
            for norm in norms:
                for method in methods:
                    run_cfg = replace(cfg, norm=norm, seed=iseed)
                    result = explain(x, ctx, method, run_cfg, target=targets[int(i)])
                    records.append(
                        compute_metrics(result, ctx.blackbox, norm, tag, int(i), iseed)
                    )
                    if norm == norms[0] and pos < grid_cols:
                        grid_images[method].append(result.image)

        rows = [originals] + [grid_images[m] for m in methods if grid_images[m]]
        if originals:
            export_image_grid(rows, out / f"grid_{tag}.pgm")

    write_results(aggregate(records), out / "results.csv")
    _write_raw(records, out / "raw_records.csv")
    manifest["finished"] = time.strftime("%Y-%m-%d %H:%M:%S")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return records


def _write_raw(records: list[MetricRecord], path) -> None:
    lines = [RAW_HEADER]
    for r in records:
        lines.append(
            f"{r.blackbox},{r.method},{r.norm},{r.instance},{r.seed},"
            f"{r.source_class},{r.target_class},{r.predicted_class},"
            f"{int(r.success)},{r.fe_dist!r},{r.pixel_dist!r},{r.opt_time!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_raw(path) -> list[MetricRecord]:
    lines = Path(path).read_text(encoding="ascii").strip().splitlines()
    if not lines or lines[0] != RAW_HEADER:
        raise ValueError(f"{path}: unexpected raw-record header")
    records = []
    for line in lines[1:]:
        tag, method, norm, inst, seed, src, tgt, pred, ok, fe, px, t = line.split(",")
        records.append(MetricRecord(method, tag, norm, float(fe), float(px), float(t),
                                    bool(int(ok)), int(inst), int(seed), int(src), int(tgt),
                                    int(pred)))
    return records


# ---------------------------------------------------------------------------
# distribution-fit report

def run_fit_report(net: DenseNet, dataset, alpha: float = 0.5, mode: str = "indicator",
                   sample_cap: int | None = None, stats: StatsFile | None = None) -> tuple[dict, StatsFile]:
    """Per-layer passing rates over the whole trunk, plus the selection record.

    The front-to-back decline of the passing rate is reported as a trend
    (fraction of adjacent layer pairs where the deeper layer rates at least as
    high), never asserted.
    """
    if stats is None:
        kw = {"sample_cap": sample_cap} if sample_cap else {}
        stats = build_stats(net, dataset, alpha=alpha, mode=mode, scan_all=True, **kw)
    layers = sorted(stats.pass_rates)
    per_layer = {layer: dict(stats.pass_rates[layer]) for layer in layers}
    indicator = [stats.pass_rates[l]["indicator"] for l in layers]
    deeper_at_least = [indicator[i + 1] >= indicator[i] for i in range(len(indicator) - 1)]
    report = {
        "depth": stats.depth,
        "alpha": alpha,
        "mode": mode,
        "per_layer": per_layer,
        "last_layer": dict(stats.pass_rates[stats.depth]),
        "selection": stats.selection.to_dict() if stats.selection else None,
        "trend_deeper_is_higher": (
            float(np.mean(deeper_at_least)) if deeper_at_least else 1.0
        ),
    }
    return report, stats
