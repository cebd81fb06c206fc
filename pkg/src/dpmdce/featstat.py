"""Class-conditional activation statistics and feature-layer selection.

The flow: group a dataset's layer activations by the classifier's PREDICTED
label, fit one distribution per (class, neuron) pair, score each layer by its
passing rate, then scan layers back to front until the rate drops below a
threshold. The scan result fixes which layers feed the fusion step.

Stats persist as versioned JSON; the schema is documented in
docs/FORMATS.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import FIT_SAMPLE_CAP, FittedDistribution, fit_neuron_distribution
from .nn import DenseNet, forward_batch

STATS_VERSION = 1
DEFAULT_ALPHA = 0.5
KS_PASS_LEVEL = 0.05
PR_MODES = ("indicator", "mean_p")

CHUNK = 1024


@dataclass
class ClassActivations:
    """One layer's activations grouped by predicted class."""

    layer_index: int
    groups: dict[int, np.ndarray]  # class -> (n_class, width)
    empty_classes: list[int]
    n_total: int

    @property
    def width(self) -> int:
        return next(iter(self.groups.values())).shape[1]


@dataclass
class LayerSelection:
    depth: int
    alpha: float
    pass_rates: dict[int, float]  # layer -> PR, for every layer the scan visited
    n_passing: int
    max_num: int
    n_selected: int
    selected_layers: list[int]

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "alpha": self.alpha,
            "pass_rates": {str(k): v for k, v in self.pass_rates.items()},
            "n_passing": self.n_passing,
            "max_num": self.max_num,
            "n_selected": self.n_selected,
            "selected_layers": self.selected_layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSelection":
        return cls(
            depth=d["depth"],
            alpha=d["alpha"],
            pass_rates={int(k): v for k, v in d["pass_rates"].items()},
            n_passing=d["n_passing"],
            max_num=d["max_num"],
            n_selected=d["n_selected"],
            selected_layers=list(d["selected_layers"]),
        )


@dataclass
class StatsFile:
    """Fitted distributions plus the layer-selection record for one classifier."""

    depth: int
    mode: str = "indicator"
    alpha: float = DEFAULT_ALPHA
    ks_threshold: float = KS_PASS_LEVEL
    layer_widths: dict[int, int] = field(default_factory=dict)
    class_counts: dict[int, int] = field(default_factory=dict)
    fits: dict[int, dict[int, list[FittedDistribution]]] = field(default_factory=dict)
    pass_rates: dict[int, dict[str, float]] = field(default_factory=dict)
    selection: LayerSelection | None = None
    meta: dict = field(default_factory=dict)

    def classes(self) -> list[int]:
        return sorted(c for c, n in self.class_counts.items() if n > 0)

    def layer_fits(self, layer: int) -> dict[int, list[FittedDistribution]]:
        if layer not in self.fits:
            raise KeyError(f"layer {layer} has no fitted stats (have {sorted(self.fits)})")
        return self.fits[layer]

    def last_layer_fits(self) -> dict[int, list[FittedDistribution]]:
        return self.layer_fits(self.depth)


def feature_depth(net: DenseNet) -> int:
    """Number of trunk (feature) layers; the linear head is not one of them."""
    if net.role != "blackbox":
        raise ValueError(f"expected a blackbox classifier, got role {net.role!r}")
    return net.depth - 1


def _forward_layer_and_pred(net: DenseNet, images: np.ndarray, layer_index: int):
    acts_chunks, pred_chunks = [], []
    for start in range(0, images.shape[0], CHUNK):
        acts = forward_batch(net, images[start : start + CHUNK])
        acts_chunks.append(acts[layer_index - 1])
        pred_chunks.append(np.argmax(acts[-1], axis=1))
    return np.concatenate(acts_chunks), np.concatenate(pred_chunks)


def collect_class_activations(net: DenseNet, dataset, layer_index: int) -> ClassActivations:
    """Group one layer's activations by the net's own argmax predictions."""
    depth = feature_depth(net)
    if not 1 <= layer_index <= depth:
        raise ValueError(f"layer_index must be in 1..{depth}, got {layer_index}")
    acts, preds = _forward_layer_and_pred(net, dataset.images, layer_index)
    n_classes = net.out_dim
    groups, empty = {}, []
    for c in range(n_classes):
        mask = preds == c
        if mask.any():
            groups[c] = acts[mask]
        else:
            empty.append(c)
    return ClassActivations(layer_index, groups, empty, len(dataset))


def fit_class_activations(
    cls_acts: ClassActivations, sample_cap: int = FIT_SAMPLE_CAP
) -> dict[int, list[FittedDistribution]]:
    """One FittedDistribution per (class, neuron) of the collected layer."""
    fits: dict[int, list[FittedDistribution]] = {}
    for c, mat in sorted(cls_acts.groups.items()):
        fits[c] = [fit_neuron_distribution(mat[:, j], sample_cap) for j in range(mat.shape[1])]
    return fits


def passing_rate(
    layer_fits: dict[int, list[FittedDistribution]],
    mode: str = "indicator",
    threshold: float = KS_PASS_LEVEL,
) -> float:
    """Fraction of (class, neuron) fits with p >= threshold, or the mean p."""
    if mode not in PR_MODES:
        raise ValueError(f"mode must be one of {PR_MODES}, got {mode!r}")
    ps = np.array([f.p_value for fits in layer_fits.values() for f in fits])
    if ps.size == 0:
        raise ValueError("no fits to rate")
    if mode == "indicator":
        return float(np.mean(ps >= threshold))
    return float(np.mean(ps))


def selection_from_pass_rates(
    rates_back_to_front: list[float], depth: int, alpha: float
) -> LayerSelection:
    """Apply the stopping rule to an already-computed PR sequence.

    ``rates_back_to_front[0]`` is the last layer's PR. The sequence may stop
    at the first sub-alpha entry (the scan stops there) or cover all layers.
    """
    if not 0 < len(rates_back_to_front) <= depth:
        raise ValueError("PR sequence must cover between 1 and depth layers")
    n_passing = 0
    for r in rates_back_to_front:
        if r < alpha:
            break
        n_passing += 1
    max_num = depth // 2
    n_selected = max(min(n_passing, max_num), 1)
    pass_rates = {depth - i: r for i, r in enumerate(rates_back_to_front)}
    return LayerSelection(
        depth=depth,
        alpha=alpha,
        pass_rates=pass_rates,
        n_passing=n_passing,
        max_num=max_num,
        n_selected=n_selected,
        selected_layers=list(range(depth - n_selected + 1, depth + 1)),
    )


def build_stats(
    net: DenseNet,
    dataset,
    alpha: float = DEFAULT_ALPHA,
    mode: str = "indicator",
    ks_threshold: float = KS_PASS_LEVEL,
    sample_cap: int = FIT_SAMPLE_CAP,
    scan_all: bool = False,
) -> StatsFile:
    """Scan layers back to front, fitting and rating each.

    The scan normally stops one layer past the first sub-alpha passing rate;
    ``scan_all`` keeps going through the whole trunk (used by the fit report).
    Both PR modes are stored for every visited layer; ``mode`` picks which one
    drives the selection.
    """
    depth = feature_depth(net)
    stats = StatsFile(depth=depth, mode=mode, alpha=alpha, ks_threshold=ks_threshold)
    rates = []
    for layer in range(depth, 0, -1):
        cls_acts = collect_class_activations(net, dataset, layer)
        fits = fit_class_activations(cls_acts, sample_cap)
        stats.fits[layer] = fits
        stats.layer_widths[layer] = cls_acts.width
        stats.pass_rates[layer] = {
            m: passing_rate(fits, m, ks_threshold) for m in PR_MODES
        }
        if not stats.class_counts:
            stats.class_counts = {c: 0 for c in cls_acts.empty_classes}
            stats.class_counts.update({c: m.shape[0] for c, m in cls_acts.groups.items()})
        rates.append(stats.pass_rates[layer][mode])
        if not scan_all and rates[-1] < alpha:
            break
    stats.selection = selection_from_pass_rates(rates, depth, alpha)
    stats.meta = {"n_samples": len(dataset), "sample_cap": sample_cap}
    return stats


def select_feature_layers(net: DenseNet, dataset, alpha: float = DEFAULT_ALPHA, **kw) -> LayerSelection:
    return build_stats(net, dataset, alpha=alpha, **kw).selection


# ---------------------------------------------------------------------------
# persistence

def save_stats(stats: StatsFile, path) -> None:
    doc = {
        "version": STATS_VERSION,
        "depth": stats.depth,
        "mode": stats.mode,
        "alpha": stats.alpha,
        "ks_threshold": stats.ks_threshold,
        "layer_widths": {str(k): v for k, v in stats.layer_widths.items()},
        "class_counts": {str(k): v for k, v in stats.class_counts.items()},
        "fits": {
            str(layer): {
                str(c): [f.to_dict() for f in fits] for c, fits in by_class.items()
            }
            for layer, by_class in stats.fits.items()
        },
        "pass_rates": {str(k): v for k, v in stats.pass_rates.items()},
        "selection": stats.selection.to_dict() if stats.selection else None,
        "meta": stats.meta,
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_stats(path) -> StatsFile:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != STATS_VERSION:
        raise ValueError(f"{path}: unsupported stats version {doc.get('version')!r}")
    return StatsFile(
        depth=doc["depth"],
        mode=doc["mode"],
        alpha=doc["alpha"],
        ks_threshold=doc["ks_threshold"],
        layer_widths={int(k): v for k, v in doc["layer_widths"].items()},
        class_counts={int(k): v for k, v in doc["class_counts"].items()},
        fits={
            int(layer): {
                int(c): [FittedDistribution.from_dict(f) for f in fits]
                for c, fits in by_class.items()
            }
            for layer, by_class in doc["fits"].items()
        },
        pass_rates={int(k): v for k, v in doc["pass_rates"].items()},
        selection=LayerSelection.from_dict(doc["selection"]) if doc["selection"] else None,
        meta=doc.get("meta", {}),
    )
