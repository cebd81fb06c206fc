"""Counterfactual solvers: the metric-guided pipeline and four pixel/latent baselines.

The main pipeline runs in two stages. Stage one moves the instance's feature
vector just across the target class's decision boundary of the linear head,
minimizing the preference-weighted Mahalanobis distance under a hinge penalty
with margin kappa. Stage two searches generator latent space for an image
whose features land on that vector while staying close to the original pixels
and classifying as the target.

Constraint handling is uniform: hinge penalty with weight c, doubled after
every `penalty_every` consecutive iterations that fail the margin. Feasible
iterates are tracked as they appear, and the best one (by the constraint-free
part of the objective) is what gets returned, so penalty escalation never
discards a solution already found.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .featstat import StatsFile
from .fusion import FusionConfig
from .importance import (
    DpmdMetric,
    build_importance,
    dpmd_distance,
    dpmd_gradient,
    estimate_precision,
)
from .nn import (
    DenseNet,
    Layer,
    VectorAdam,
    backprop_input_only,
    forward_batch,
    forward_with_trace,
)
from .targets import class_prototype, strategy1_distribution, strategy2_proto

METHODS = ("dpmdce", "min-edit", "cem", "proto-cf", "piece")
NORMS = ("l1", "l2")
SUCCESS_RULES = ("target", "flip")


@dataclass
class SolverConfig:
    iterations: int = 8000
    lr: float = 0.05
    kappa: float = 0.5            # hinge margin, in logit units
    penalty: float = 1.0          # starting hinge weight c
    penalty_growth: float = 2.0
    penalty_every: int = 1000
    mu: float = 0.1               # pixel-term weight of the latent inversion
    distance_weight: float = 1.0  # multiplier on the feature-space distance term
    beta: float = 1.0             # importance boost in the metric
    norm: str = "l2"
    seed: int = 0
    n_init: int = 16              # latent restarts scored before descent
    success_rule: str = "target"
    # baseline weights
    cem_l1: float = 0.1           # beta of the elastic-net term
    gamma: float = 1.0            # autoencoder residual weight
    theta: float = 1.0            # prototype pull weight
    quantile_band: float = 0.05   # t of the quantile-replacement rule

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.success_rule not in SUCCESS_RULES:
            raise ValueError(f"success_rule must be one of {SUCCESS_RULES}")
        for name in ("kappa", "penalty", "mu", "distance_weight", "beta",
                     "cem_l1", "gamma", "theta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class CfResult:
    method: str
    norm: str
    source_image: np.ndarray
    source_class: int
    target_class: int
    image: np.ndarray
    predicted_class: int
    success: bool
    feature_cf: np.ndarray | None = None
    latent: np.ndarray | None = None
    wall_time: float = 0.0
    iterations: int = 0
    info: dict = field(default_factory=dict)


@dataclass
class FeatureSolution:
    feature: np.ndarray
    distance: float
    feasible: bool         # reached argmax == target at some iterate
    margin_feasible: bool  # reached the full kappa margin
    iterations: int


@dataclass
class LatentSolution:
    z: np.ndarray
    image: np.ndarray
    objective: float  # constraint-free value at the returned iterate
    feasible: bool
    iterations: int


@dataclass
class PixelSolution:
    image: np.ndarray
    objective: float
    feasible: bool
    iterations: int


def _head_params(head) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(head, Layer):
        return head.weight, head.bias
    if isinstance(head, DenseNet) and head.depth == 1:
        return head.layers[0].weight, head.layers[0].bias
    raise ValueError("head must be a single linear layer")


def _runner_up(logits: np.ndarray, target: int) -> tuple[int, float]:
    """Strongest competitor to `target` and the margin over it (>0 = winning)."""
    masked = logits.copy()
    masked[target] = -np.inf
    k = int(np.argmax(masked))
    return k, float(logits[target] - logits[k])


def predict(net: DenseNet, x) -> int:
    return int(np.argmax(forward_with_trace(net, x).logits))


# ---------------------------------------------------------------------------
# stage one: feature space

def solve_feature_cf(e, target: int, head, metric: DpmdMetric, cfg: SolverConfig) -> FeatureSolution:
    """Closest point (in the metric) whose head logits favor `target` by kappa.

    Already-correctly-classified inputs return unchanged. Iterates that merely
    win the argmax are kept as a fallback when the full margin is never met.
    """
    w, b = _head_params(head)
    e = np.asarray(e, dtype=np.float64)
    logits = w @ e + b
    if int(np.argmax(logits)) == target:
        _, margin = _runner_up(logits, target)
        return FeatureSolution(e.copy(), 0.0, True, margin >= cfg.kappa, 0)

    adam = VectorAdam(cfg.lr)
    cur = e.copy()
    c = cfg.penalty
    best_margin: tuple[float, np.ndarray] | None = None
    best_any: tuple[float, np.ndarray] | None = None
    infeasible = 0
    for _ in range(cfg.iterations):
        logits = w @ cur + b
        k, margin = _runner_up(logits, target)
        dist = dpmd_distance(cur, e, metric)
        if margin > 0 and (best_any is None or dist < best_any[0]):
            best_any = (dist, cur.copy())
        if margin >= cfg.kappa:
            infeasible = 0
            if best_margin is None or dist < best_margin[0]:
                best_margin = (dist, cur.copy())
        else:
            infeasible += 1
            if infeasible % cfg.penalty_every == 0:
                c *= cfg.penalty_growth
        grad = cfg.distance_weight * dpmd_gradient(cur, e, metric)
        if margin < cfg.kappa:
            grad = grad + c * (w[k] - w[target])
        cur = adam.step(cur, grad)

    logits = w @ cur + b
    _, margin = _runner_up(logits, target)
    dist = dpmd_distance(cur, e, metric)
    if margin > 0 and (best_any is None or dist < best_any[0]):
        best_any = (dist, cur.copy())
    if margin >= cfg.kappa and (best_margin is None or dist < best_margin[0]):
        best_margin = (dist, cur.copy())

    if best_margin is not None:
        return FeatureSolution(best_margin[1], best_margin[0], True, True, cfg.iterations)
    if best_any is not None:
        return FeatureSolution(best_any[1], best_any[0], True, False, cfg.iterations)
    return FeatureSolution(cur, dist, False, False, cfg.iterations)


# ---------------------------------------------------------------------------
# stage two: latent space

def invert_latent(
    feature_target,
    x,
    generator: DenseNet,
    blackbox: DenseNet,
    target: int,
    cfg: SolverConfig,
    rng: np.random.Generator | None = None,
    z_init: np.ndarray | None = None,
    soft_label: bool = False,
) -> LatentSolution:
    """Find z whose generated image matches the feature target and the label.

    ``soft_label`` keeps the hinge weight fixed and returns the best TOTAL
    objective regardless of feasibility; the strict mode returns the best
    feasible iterate by the constraint-free objective and reports failure if
    none appears within the budget.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    feature_target = np.asarray(feature_target, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    trunk = blackbox.feature_extractor()
    w, b = _head_params(blackbox.head())
    l1 = cfg.norm == "l1"

    def forward(z):
        tg = forward_with_trace(generator, z)
        img = tg.logits
        te = forward_with_trace(trunk, img)
        feat = te.logits
        logits = w @ feat + b
        fd = feat - feature_target
        pd = img - x
        core = float(fd @ fd) + cfg.mu * (float(np.abs(pd).sum()) if l1 else float(pd @ pd))
        k, margin = _runner_up(logits, target)
        hinge = max(0.0, cfg.kappa - margin)
        return tg, te, img, feat, core, hinge, k, margin

    if z_init is not None:
        z = np.asarray(z_init, dtype=np.float64).copy()
    else:
        cands = rng.standard_normal((max(cfg.n_init, 1), generator.in_dim))
        scores = []
        for zc in cands:
            *_, core, hinge, _, _ = forward(zc)
            scores.append(core + cfg.penalty * hinge)
        z = cands[int(np.argmin(scores))].copy()

    adam = VectorAdam(cfg.lr)
    c = cfg.penalty
    best: tuple[float, np.ndarray, np.ndarray, float] | None = None  # key, z, img, core
    infeasible = 0

    def consider(z_val, img, core, hinge, margin):
        nonlocal best
        if soft_label:
            key = core + c * hinge
            if best is None or key < best[0]:
                best = (key, z_val.copy(), img.copy(), core)
        elif margin > 0 and (best is None or core < best[0]):
            best = (core, z_val.copy(), img.copy(), core)

    for _ in range(cfg.iterations):
        tg, te, img, feat, core, hinge, k, margin = forward(z)
        consider(z, img, core, hinge, margin)
        if not soft_label:
            if margin >= cfg.kappa:
                infeasible = 0
            else:
                infeasible += 1
                if infeasible % cfg.penalty_every == 0:
                    c *= cfg.penalty_growth

        dfeat = 2.0 * (feat - feature_target)
        if hinge > 0:
            dfeat = dfeat + c * (w[k] - w[target])
        g_img = backprop_input_only(trunk, te, dfeat)
        pd = img - x
        g_img = g_img + cfg.mu * (np.sign(pd) if l1 else 2.0 * pd)
        g_z = backprop_input_only(generator, tg, g_img)
        z = adam.step(z, g_z)

    _, _, img, _, core, hinge, _, margin = forward(z)
    consider(z, img, core, hinge, margin)

    if best is None:
        return LatentSolution(z, img, core, False, cfg.iterations)
    if soft_label:
        feasible = predict(blackbox, best[2]) == target
        return LatentSolution(best[1], best[2], best[3], feasible, cfg.iterations)
    return LatentSolution(best[1], best[2], best[3], True, cfg.iterations)


# ---------------------------------------------------------------------------
# pixel-space baselines

def _pixel_descent(x, blackbox: DenseNet, source: int, target: int, cfg: SolverConfig, terms) -> PixelSolution:
    """Projected descent over the image itself, shared by the pixel baselines.

    ``terms`` is a list of callables x' -> (value, grad); their sum is the
    constraint-free objective. The label constraint is the usual hinge, aimed
    at the target class or merely away from the source depending on the
    configured success rule.
    """
    x = np.asarray(x, dtype=np.float64)
    targeted = cfg.success_rule == "target"
    adam = VectorAdam(cfg.lr)
    cur = x.copy()
    c = cfg.penalty
    best: tuple[float, np.ndarray] | None = None
    infeasible = 0

    def measure(logits):
        # (margin, positive logit index, negative logit index); hinge pushes
        # logits[neg] above logits[pos] by kappa, and margin > 0 is feasible
        if targeted:
            k, margin = _runner_up(logits, target)
            return margin, k, target
        k, margin_src = _runner_up(logits, source)
        return -margin_src, source, k

    for _ in range(cfg.iterations):
        trace = forward_with_trace(blackbox, cur)
        margin, pos, neg = measure(trace.logits)
        core = 0.0
        grad = np.zeros_like(cur)
        for term in terms:
            v, g = term(cur)
            core += v
            grad = grad + g
        if margin > 0 and (best is None or core < best[0]):
            best = (core, cur.copy())
        if margin >= cfg.kappa:
            infeasible = 0
        else:
            infeasible += 1
            if infeasible % cfg.penalty_every == 0:
                c *= cfg.penalty_growth
            grad_out = np.zeros_like(trace.logits)
            grad_out[pos] = c
            grad_out[neg] = -c
            grad = grad + backprop_input_only(blackbox, trace, grad_out)
        cur = np.clip(adam.step(cur, grad), 0.0, 1.0)

    trace = forward_with_trace(blackbox, cur)
    margin, _, _ = measure(trace.logits)
    core = sum(term(cur)[0] for term in terms)
    if margin > 0 and (best is None or core < best[0]):
        best = (core, cur.copy())

    if best is None:
        return PixelSolution(cur, core, False, cfg.iterations)
    return PixelSolution(best[1], best[0], True, cfg.iterations)


def _edit_distance_term(x, norm: str):
    x = np.asarray(x, dtype=np.float64)
    if norm == "l1":
        return lambda xp: (float(np.abs(xp - x).sum()), np.sign(xp - x))
    # squared L2: smooth at zero edit, and the beta=0/gamma=0 limit of the
    # elastic-net objective below
    return lambda xp: (float(np.sum((xp - x) ** 2)), 2.0 * (xp - x))


def _elastic_term(x, l1_weight: float):
    x = np.asarray(x, dtype=np.float64)

    def term(xp):
        d = xp - x
        value = l1_weight * float(np.abs(d).sum()) + float(np.sum(d * d))
        return value, l1_weight * np.sign(d) + 2.0 * d

    return term


def _ae_residual_term(encoder: DenseNet, decoder: DenseNet, gamma: float):
    def term(xp):
        te = forward_with_trace(encoder, xp)
        td = forward_with_trace(decoder, te.logits)
        r = xp - td.logits
        pullback = backprop_input_only(encoder, te, backprop_input_only(decoder, td, r))
        return gamma * float(np.sum(r * r)), 2.0 * gamma * (r - pullback)

    return term


def _proto_term(encoder: DenseNet, proto: np.ndarray, theta: float):
    proto = np.asarray(proto, dtype=np.float64)

    def term(xp):
        te = forward_with_trace(encoder, xp)
        d = te.logits - proto
        return theta * float(np.sum(d * d)), backprop_input_only(encoder, te, 2.0 * theta * d)

    return term


def _finish(method, x, source, target, blackbox, cfg, image, started,
            feature_cf=None, latent=None, iterations=0, info=None) -> CfResult:
    predicted = predict(blackbox, image)
    success = predicted == target if cfg.success_rule == "target" else predicted != source
    return CfResult(
        method=method,
        norm=cfg.norm,
        source_image=np.asarray(x, dtype=np.float64),
        source_class=source,
        target_class=target,
        image=np.asarray(image, dtype=np.float64),
        predicted_class=predicted,
        success=success,
        feature_cf=feature_cf,
        latent=latent,
        wall_time=max(time.perf_counter() - started, 1e-9),
        iterations=iterations,
        info=info or {},
    )


def baseline_min_edit(x, blackbox: DenseNet, target: int, cfg: SolverConfig) -> CfResult:
    started = time.perf_counter()
    source = predict(blackbox, x)
    sol = _pixel_descent(x, blackbox, source, target, cfg, [_edit_distance_term(x, cfg.norm)])
    return _finish("min-edit", x, source, target, blackbox, cfg, sol.image, started,
                   iterations=sol.iterations, info={"objective": sol.objective})


def baseline_cem(x, blackbox: DenseNet, encoder: DenseNet, decoder: DenseNet,
                 target: int, cfg: SolverConfig) -> CfResult:
    started = time.perf_counter()
    source = predict(blackbox, x)
    terms = [_elastic_term(x, cfg.cem_l1), _ae_residual_term(encoder, decoder, cfg.gamma)]
    sol = _pixel_descent(x, blackbox, source, target, cfg, terms)
    return _finish("cem", x, source, target, blackbox, cfg, sol.image, started,
                   iterations=sol.iterations, info={"objective": sol.objective})


def baseline_proto_cf(x, blackbox: DenseNet, encoder: DenseNet, decoder: DenseNet,
                      target: int, proto, cfg: SolverConfig) -> CfResult:
    started = time.perf_counter()
    source = predict(blackbox, x)
    terms = [
        _elastic_term(x, cfg.cem_l1),
        _ae_residual_term(encoder, decoder, cfg.gamma),
        _proto_term(encoder, proto, cfg.theta),
    ]
    sol = _pixel_descent(x, blackbox, source, target, cfg, terms)
    return _finish("proto-cf", x, source, target, blackbox, cfg, sol.image, started,
                   iterations=sol.iterations, info={"objective": sol.objective})


def piece_feature_target(e, fits, t: float) -> tuple[np.ndarray, list[int]]:
    """Replace features outside the target class's [t, 1-t] quantile band.

    Point masses collapse the band, so any differing value gets replaced.
    Returns the edited vector and the indices that changed.
    """
    e = np.asarray(e, dtype=np.float64)
    if not 0 < t < 0.5:
        raise ValueError("quantile t must be in (0, 0.5)")
    out = e.copy()
    edited = []
    for j, dist in enumerate(fits):
        if dist.family == "degenerate_point":
            lo = hi = dist.params[0]
        else:
            lo, hi = float(dist.ppf(t)), float(dist.ppf(1.0 - t))
        if e[j] < lo or e[j] > hi:
            out[j] = dist.mean()
            edited.append(j)
    return out, edited


def baseline_piece(x, blackbox: DenseNet, generator: DenseNet, stats: StatsFile,
                   target: int, cfg: SolverConfig) -> CfResult:
    started = time.perf_counter()
    source = predict(blackbox, x)
    fits_by_class = stats.last_layer_fits()
    if target not in fits_by_class:
        raise ValueError(f"no last-layer stats for class {target}")
    e = forward_with_trace(blackbox, x).features
    feature_target, edited = piece_feature_target(e, fits_by_class[target], cfg.quantile_band)
    sol = invert_latent(feature_target, x, generator, blackbox, target, cfg,
                        rng=np.random.default_rng(cfg.seed), soft_label=True)
    return _finish("piece", x, source, target, blackbox, cfg, sol.image, started,
                   feature_cf=feature_target, latent=sol.z, iterations=sol.iterations,
                   info={"edited_features": edited, "objective": sol.objective})


# ---------------------------------------------------------------------------
# dispatch

@dataclass
class ExplainContext:
    """Everything a single explanation run reads; all members are read-only."""

    blackbox: DenseNet
    generator: DenseNet | None = None
    encoder: DenseNet | None = None
    decoder: DenseNet | None = None
    stats: StatsFile | None = None
    train_data: Dataset | None = None
    precision: np.ndarray | None = None
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ValueError(f"context is missing: {', '.join(missing)}")


def extract_features(blackbox: DenseNet, images, chunk: int = 1024) -> np.ndarray:
    """Penultimate-layer activations for a batch of images."""
    trunk = blackbox.feature_extractor()
    images = np.asarray(images, dtype=np.float64)
    return np.concatenate(
        [forward_batch(trunk, images[i : i + chunk])[-1] for i in range(0, images.shape[0], chunk)]
    )


def make_context(
    blackbox: DenseNet,
    generator: DenseNet | None = None,
    encoder: DenseNet | None = None,
    decoder: DenseNet | None = None,
    stats: StatsFile | None = None,
    train_data: Dataset | None = None,
    ridge: float = 1e-3,
    fusion: FusionConfig | None = None,
) -> ExplainContext:
    """Bundle the models and precompute the feature-space precision matrix."""
    precision = None
    if train_data is not None:
        precision = estimate_precision(extract_features(blackbox, train_data.images), ridge)
    return ExplainContext(
        blackbox=blackbox,
        generator=generator,
        encoder=encoder,
        decoder=decoder,
        stats=stats,
        train_data=train_data,
        precision=precision,
        fusion=fusion or FusionConfig(),
    )


def resolve_target(x, ctx: ExplainContext, target) -> int:
    source = predict(ctx.blackbox, x)
    if isinstance(target, (int, np.integer)):
        if int(target) == source:
            raise ValueError(f"target {target} equals the predicted class")
        return int(target)
    if target in (None, "strategy1"):
        ctx.require("stats")
        return strategy1_distribution(source, ctx.stats).target_class
    if target == "strategy2":
        ctx.require("train_data")
        return strategy2_proto(x, ctx.blackbox, ctx.train_data).target_class
    raise ValueError(f"bad target {target!r}; expected a class, 'strategy1' or 'strategy2'")


def explain(x, ctx: ExplainContext, method: str, cfg: SolverConfig | None = None,
            target=None) -> CfResult:
    """Run one method on one instance and stamp timing plus the success flag."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    cfg = cfg or SolverConfig()
    x = np.asarray(x, dtype=np.float64)
    started = time.perf_counter()
    source = predict(ctx.blackbox, x)
    j_star = resolve_target(x, ctx, target)

    if method == "dpmdce":
        ctx.require("generator", "stats", "precision")
        importance = build_importance(source, j_star, ctx.stats, fusion=ctx.fusion)
        metric = DpmdMetric(ctx.precision, cfg.beta, importance.normalized())
        e = forward_with_trace(ctx.blackbox, x).features
        fsol = solve_feature_cf(e, j_star, ctx.blackbox.head(), metric, cfg)
        lsol = invert_latent(fsol.feature, x, ctx.generator, ctx.blackbox, j_star, cfg,
                             rng=np.random.default_rng(cfg.seed))
        return _finish("dpmdce", x, source, j_star, ctx.blackbox, cfg, lsol.image, started,
                       feature_cf=fsol.feature, latent=lsol.z,
                       iterations=fsol.iterations + lsol.iterations,
                       info={"feature_distance": fsol.distance,
                             "feature_feasible": fsol.feasible,
                             "margin_feasible": fsol.margin_feasible,
                             "inversion_objective": lsol.objective})
    if method == "min-edit":
        return baseline_min_edit(x, ctx.blackbox, j_star, cfg)
    if method == "cem":
        ctx.require("encoder", "decoder")
        return baseline_cem(x, ctx.blackbox, ctx.encoder, ctx.decoder, j_star, cfg)
    if method == "proto-cf":
        ctx.require("encoder", "decoder", "train_data")
        proto = class_prototype(x, ctx.blackbox, ctx.train_data, j_star, encoder=ctx.encoder)
        return baseline_proto_cf(x, ctx.blackbox, ctx.encoder, ctx.decoder, j_star, proto, cfg)
    ctx.require("generator", "stats")
    return baseline_piece(x, ctx.blackbox, ctx.generator, ctx.stats, j_star, cfg)
