"""Command-line entry points.

Artifacts live in plain directories with fixed names so the commands can find
each other's outputs:

    data/       train-images-idx3-ubyte, train-labels-idx1-ubyte,
                t10k-images-idx3-ubyte,  t10k-labels-idx1-ubyte
    models/     blackbox{5,7,9}.model, generator.model, discriminator.model,
                encoder.model, decoder.model, stats_blackbox{d}.json

`synth-data` fills the data directory with the built-in generated digits;
point the commands at a directory holding the real IDX files to use those
instead.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench, data, engine, featstat, zoo
from .engine import METHODS, NORMS, SolverConfig
from .zoo import GanConfig, TrainConfig

IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _load_split(data_dir: Path, split: str) -> data.Dataset:
    img, lab = (data_dir / n for n in IDX_NAMES[split])
    if not img.exists() or not lab.exists():
        raise SystemExit(
            f"missing {split} IDX files under {data_dir}; run `dpmdce synth-data --out {data_dir}` "
            "or point --data at a directory holding the real files"
        )
    return data.load_idx(img, lab)


def _add_data_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="directory with the IDX files")


def _solver_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int, default=8000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--kappa", type=float, default=0.5)
    p.add_argument("--mu", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--norm", choices=NORMS, default="l2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--success-rule", choices=engine.SUCCESS_RULES, default="target")


def _solver_config(args) -> SolverConfig:
    return SolverConfig(
        iterations=args.iterations, lr=args.lr, kappa=args.kappa, mu=args.mu,
        beta=args.beta, norm=args.norm, seed=args.seed, success_rule=args.success_rule,
    )


def _parse_target(text: str):
    if text in ("strategy1", "strategy2", "auto:strategy1", "auto:strategy2"):
        return text.removeprefix("auto:")
    return int(text)


def cmd_synth_data(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", args.n_train), ("test", args.n_test)):
        ds = data.synthesize_digits(n, args.seed + (0 if split == "train" else 101), split)
        img, lab = (args.out / name for name in IDX_NAMES[split])
        data.save_idx(ds, img, lab)
        print(f"wrote {n} {split} digits -> {img}, {lab}")
    return 0


def cmd_train_blackbox(args) -> int:
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    net = zoo.train_blackbox(args.depth, train, test, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    data.save_model(args.out, net)
    print(f"depth-{args.depth} classifier: test accuracy {net.meta['accuracy']:.4f} -> {args.out}")
    return 0


def cmd_train_gan(args) -> int:
    train = _load_split(args.data, "train")
    cfg = GanConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    gen, dis = zoo.train_gan(train, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    data.save_model(args.out / "generator.model", gen)
    data.save_model(args.out / "discriminator.model", dis)
    note = " (collapse warning)" if gen.meta.get("mode_collapse_warning") else ""
    print(f"generator sample pixel variance {gen.meta['sample_pixel_var']:.5f}{note} -> {args.out}")
    return 0


def cmd_train_ae(args) -> int:
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    enc, dec = zoo.train_autoencoder(train, test, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    data.save_model(args.out / "encoder.model", enc)
    data.save_model(args.out / "decoder.model", dec)
    print(f"autoencoder test MSE {enc.meta['test_mse']:.5f} -> {args.out}")
    return 0


def cmd_fit_distributions(args) -> int:
    net = data.load_model(args.model)
    train = _load_split(args.data, "train")
    kw = {"sample_cap": args.sample_cap} if args.sample_cap else {}
    stats = featstat.build_stats(net, train, alpha=args.alpha, mode=args.mode,
                                 scan_all=args.scan_all, **kw)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    featstat.save_stats(stats, args.out)
    sel = stats.selection
    print(f"scanned layers { sorted(stats.pass_rates) }, "
          f"selected {sel.selected_layers} (T={sel.n_selected}) -> {args.out}")
    return 0


def cmd_fit_report(args) -> int:
    net = data.load_model(args.model)
    train = _load_split(args.data, "train")
    report, stats = bench.run_fit_report(net, train, alpha=args.alpha, mode=args.mode,
                                         sample_cap=args.sample_cap)
    print(f"layer  indicator  mean_p   (depth {report['depth']})")
    for layer in sorted(report["per_layer"]):
        pr = report["per_layer"][layer]
        print(f"{layer:5d}  {pr['indicator']:9.3f}  {pr['mean_p']:6.3f}")
    print(f"last layer: pass {report['last_layer']['indicator']:.3f}, "
          f"mean p {report['last_layer']['mean_p']:.3f}")
    print(f"deeper-rates-higher trend: {report['trend_deeper_is_higher']:.2f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(report, indent=2), encoding="utf-8")
        if args.save_stats:
            featstat.save_stats(stats, args.out.with_suffix(".stats.json"))
    return 0


def _load_context(args, train: data.Dataset) -> engine.ExplainContext:
    blackbox = data.load_model(args.model)
    generator = data.load_model(args.gan) if args.gan else None
    encoder = data.load_model(args.ae_enc) if args.ae_enc else None
    decoder = data.load_model(args.ae_dec) if args.ae_dec else None
    stats = featstat.load_stats(args.stats) if args.stats else None
    return engine.make_context(blackbox, generator, encoder, decoder, stats, train)


def cmd_explain(args) -> int:
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test")
    ctx = _load_context(args, train)
    x = test.images[args.index]
    cfg = _solver_config(args)
    result = engine.explain(x, ctx, args.method, cfg, target=_parse_target(args.target))
    record = bench.compute_metrics(result, ctx.blackbox, cfg.norm, instance=args.index,
                                   seed=cfg.seed)
    print(f"{args.method}: class {result.source_class} -> {result.predicted_class} "
          f"(target {result.target_class}), success={result.success}, "
          f"fe_dist={record.fe_dist:.4f}, pixel_dist={record.pixel_dist:.4f}, "
          f"time={result.wall_time:.2f}s")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        data.export_image_grid([[result.source_image, result.image]],
                               args.out / f"explain_{args.index}_{args.method}.pgm")
        print(f"wrote {args.out / f'explain_{args.index}_{args.method}.pgm'}")
    return 0


def cmd_benchmark(args) -> int:
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test")
    models_dir: Path = args.models
    generator = data.load_model(models_dir / "generator.model")
    encoder = data.load_model(models_dir / "encoder.model")
    decoder = data.load_model(models_dir / "decoder.model")

    contexts = {}
    for depth in (5, 7, 9):
        model_path = models_dir / f"blackbox{depth}.model"
        stats_path = models_dir / f"stats_blackbox{depth}.json"
        if model_path.exists() and stats_path.exists():
            contexts[f"blackbox{depth}"] = engine.make_context(
                data.load_model(model_path), generator, encoder, decoder,
                featstat.load_stats(stats_path), train,
            )
    if not contexts:
        raise SystemExit(f"no blackbox{{5,7,9}}.model + stats_blackbox*.json pairs in {models_dir}")

    methods = METHODS if args.methods == "all" else tuple(args.methods.split(","))
    norms = tuple(args.norms.split(","))
    cfg = _solver_config(args)
    records = bench.run_benchmark(contexts, test, args.out, methods, norms,
                                  n_instances=args.n, seed=args.seed, cfg=cfg)
    for row in bench.aggregate(records):
        print(f"{row.method:9s} {row.blackbox:9s} {row.norm}: "
              f"fe {row.fe_dist_mean:7.3f}±{row.fe_dist_std:6.3f}  "
              f"px {row.pixel_dist_mean:7.3f}±{row.pixel_dist_std:6.3f}  "
              f"suc {row.suc_rate:.2f}")
    print(f"results -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpmdce",
                                     description="distribution-preference counterfactuals")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write generated digit IDX files")
    p.add_argument("--n-train", type=int, default=8000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-blackbox", help="train one classifier")
    _add_data_arg(p)
    p.add_argument("--depth", type=int, choices=(5, 7, 9), required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_blackbox)

    p = sub.add_parser("train-gan", help="train the generator/discriminator pair")
    _add_data_arg(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="directory for the two model files")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("train-ae", help="train the autoencoder pair")
    _add_data_arg(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="directory for the two model files")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("fit-distributions", help="fit per-neuron stats and select layers")
    _add_data_arg(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--mode", choices=featstat.PR_MODES, default="indicator")
    p.add_argument("--sample-cap", type=int, default=None)
    p.add_argument("--scan-all", action="store_true", help="fit every layer, not just the scan")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fit_distributions)

    p = sub.add_parser("fit-report", help="per-layer passing-rate report")
    _add_data_arg(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--mode", choices=featstat.PR_MODES, default="indicator")
    p.add_argument("--sample-cap", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="also write the report as JSON")
    p.add_argument("--save-stats", action="store_true")
    p.set_defaults(func=cmd_fit_report)

    p = sub.add_parser("explain", help="explain one test instance")
    _add_data_arg(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--gan", type=Path, default=None, help="generator model file")
    p.add_argument("--ae-enc", type=Path, default=None)
    p.add_argument("--ae-dec", type=Path, default=None)
    p.add_argument("--stats", type=Path, default=None)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--target", default="strategy1",
                   help="a digit, strategy1, or strategy2 (default strategy1)")
    p.add_argument("--index", type=int, required=True, help="test-set instance index")
    p.add_argument("--out", type=Path, default=None)
    _solver_args(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("benchmark", help="run the full comparison grid")
    _add_data_arg(p)
    p.add_argument("--models", type=Path, required=True, help="directory of model/stats files")
    p.add_argument("--methods", default="all", help="comma list or 'all'")
    p.add_argument("--norms", default="l1,l2")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--out", type=Path, required=True)
    _solver_args(p)
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, zoo.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
