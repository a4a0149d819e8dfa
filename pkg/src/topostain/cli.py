"""``topostain`` command-line entry point.

Exit codes: 0 ok, 2 I/O or usage error, 3 training divergence, 4 metric
precondition failure, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .config import SCHEMA, ConfigError

EXIT_OK, EXIT_IO, EXIT_DIVERGED, EXIT_METRIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5

ABLATIONS = {
    "tacm": ("use_tacm",),
    "tcpm": ("use_tcpm",),
    "pert": ("use_pert",),
    "all": ("use_tacm", "use_tcpm", "use_pert"),
}


class MetricPrecondition(ValueError):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_keys(p: argparse.ArgumentParser, sections) -> None:
    g = p.add_argument_group("config keys (defaults ← --config file ← TOPOSTAIN_SEED ← flags)")
    for k, key in SCHEMA.items():
        if key.section in sections:
            g.add_argument(_flag(k), dest=f"key_{k}", metavar="V", default=None,
                           help=f"{key.help + ' ' if key.help else ''}(default: {C._render(key.default)})")


def _keys_epilog() -> str:
    lines = ["config keys and defaults:"]
    for k, key in SCHEMA.items():
        lines.append(f"  {k:<20} {C._render(key.default):<22} [{key.section}]")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topostain",
        description="Topology-aware virtual staining toolkit.",
        epilog=_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_text, sections, parent=sub):
        p = parent.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        _add_keys(p, sections)
        return p

    p = cmd("synth", "write a synthetic weakly-paired dataset", ("common", "synth"))
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = cmd("train", "train the virtual-staining GAN on a dataset", ("common", "train"))
    p.add_argument("--data", type=Path, required=True, help="dataset directory with manifest.csv")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[],
                   help="disable a component; repeatable")
    p.set_defaults(func=cmd_train)

    p = cmd("translate", "render H&E images of a dataset through a checkpoint", ("common", "train"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_translate)

    p = cmd("eval", "image-quality, distribution and pathology metrics", ("eval",))
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--gen-glob", default="*.png")
    p.add_argument("--ref-glob", default="*.png")
    p.add_argument("--gen-features", type=Path, help="TAGF features of the generated set")
    p.add_argument("--ref-features", type=Path, help="TAGF features of the reference set")
    p.add_argument("--pathology", action="store_true", help="positive-area ratios, ICC and trend")
    p.add_argument("--masks", type=Path, help="ground-truth masks used as the reference ratios")
    p.add_argument("--mask-glob", default="mask_*.png")
    p.add_argument("--out", type=Path, required=True, help="metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = cmd("gradcheck", "finite-difference check of every operation and loss", ("common",))
    p.add_argument("--only", action="append", default=[], help="check name(s), comma-separated; repeatable")
    p.add_argument("--coords", type=int, default=8, help="coordinates sampled per checked tensor")
    p.set_defaults(func=cmd_gradcheck)

    g = sub.add_parser("graph", help="inspect patch graphs built from TAGF features")
    gsub = g.add_subparsers(dest="graph_command", required=True)
    p = cmd("inspect", "dump the adjacency grid and degree histogram", ("graph",), gsub)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--grid", type=Path, help="adjacency grid output (default: stdout)")
    p.add_argument("--hist", type=Path, help="degree histogram CSV output (default: stdout)")
    p.set_defaults(func=cmd_graph_inspect)
    p = cmd("importance", "PageRank node importance as CSV", ("graph", "train"), gsub)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, help="CSV output (default: stdout)")
    p.set_defaults(func=cmd_graph_importance)
    return parser


def _resolve(args, extra: dict | None = None) -> C.RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_") and v is not None}
    cfg = C.resolve(args.config, overrides)
    for k, v in (extra or {}).items():
        cfg.set(k, v, "flag")
    return cfg


def cmd_synth(args) -> int:
    from .synth import generate_dataset

    cfg = _resolve(args)
    manifest = generate_dataset(cfg.synth_config(), cfg["count"], args.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    from .gan.train import TrainingDivergence, train
    from .synth import load_dataset

    ablated = {flag: False for name in args.ablate for flag in ABLATIONS[name]}
    cfg = _resolve(args, ablated)
    tcfg = cfg.train_config()
    print(cfg.dump(("common", "train"), with_source=True), end="")
    pairs = load_dataset(args.data)
    if not pairs:
        raise MetricPrecondition(f"{args.data}: dataset is empty")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.cfg").write_text(cfg.dump(("common", "train")))
    try:
        run = train(pairs, tcfg, args.out)
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.snapshot is not None:
            print(f"snapshot: {exc.snapshot}", file=sys.stderr)
        return EXIT_DIVERGED
    print(run.loss_csv)
    return EXIT_OK


def cmd_translate(args) -> int:
    from .gan.train import load_models, translate
    from .synth import load_dataset, save_png

    cfg = _resolve(args)
    models = load_models(args.checkpoint, cfg.train_config())
    pairs = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(translate(models, [p[0] for p in pairs])):
        save_png(args.out / f"fake_{i:05d}.png", img)
    print(args.out)
    return EXIT_OK


def _images(directory: Path, pattern: str) -> list[np.ndarray]:
    from .synth import load_png

    if not directory.is_dir():
        raise OSError(f"{directory}: not a directory")
    return [load_png(p) for p in sorted(directory.glob(pattern))]


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std())


def cmd_eval(args) -> int:
    from .gan.train import FeatureExtractor
    from .metrics import (
        MetricReport,
        SSIMConfig,
        frechet_distance,
        gaussian_stats,
        icc,
        kid,
        positive_area_ratio,
        psnr,
        read_tagf,
        regression_trend,
        ssim,
        stain_deconvolve,
    )

    cfg = _resolve(args)
    gen = _images(args.generated, args.gen_glob)
    ref = _images(args.reference, args.ref_glob)
    if not gen or len(gen) != len(ref):
        raise MetricPrecondition(f"need equally many generated and reference images, got {len(gen)} and {len(ref)}")
    if any(g.shape != r.shape for g, r in zip(gen, ref)):
        raise MetricPrecondition("generated and reference images differ in size")
    report = MetricReport({
        **cfg.section("eval"),
        "generated": str(args.generated),
        "reference": str(args.reference),
        "pathology": args.pathology,
    })
    n = len(gen)
    try:
        scfg = SSIMConfig(window=cfg["ssim_window"])
        m, s = _mean_sd([ssim(g, r, scfg) for g, r in zip(gen, ref)])
        report.add("ssim_mean", m, n)
        report.add("ssim_sd", s, n)
        m, s = _mean_sd([psnr(g, r) for g, r in zip(gen, ref)])
        report.add("psnr_mean", m, n)
        report.add("psnr_sd", s, n)

        if args.gen_features or args.ref_features:
            if not (args.gen_features and args.ref_features):
                raise MetricPrecondition("--gen-features and --ref-features go together")
            fg, fr = read_tagf(args.gen_features), read_tagf(args.ref_features)
        else:
            ext = FeatureExtractor(seed=cfg["extractor_seed"])
            fg, fr = ext(gen), ext(ref)
        report.add("frechet_proxy", frechet_distance(gaussian_stats(fr), gaussian_stats(fg)), min(len(fg), len(fr)))
        report.add("kid_x1e3", 1e3 * kid(fr, fg), min(len(fg), len(fr)))

        if args.pathology:
            th = cfg["dab_threshold"]
            gen_ratio = [positive_area_ratio(stain_deconvolve(g)[1], th) for g in gen]
            if args.masks is not None:
                masks = _images(args.masks, args.mask_glob)
                if len(masks) != n:
                    raise MetricPrecondition(f"{len(masks)} masks for {n} images")
                ref_ratio = [float(np.mean(mk[..., 0] > 127)) for mk in masks]
            else:
                ref_ratio = [positive_area_ratio(stain_deconvolve(r)[1], th) for r in ref]
            for i, (a, b) in enumerate(zip(gen_ratio, ref_ratio)):
                report.add(f"ratio_generated_{i:05d}", a, 1)
                report.add(f"ratio_reference_{i:05d}", b, 1)
            report.add("icc", icc(gen_ratio, ref_ratio, cfg["icc_variant"]), n)
            trend = regression_trend(ref_ratio, gen_ratio)
            report.add("slope", trend.slope, n)
            report.add("intercept", trend.intercept, n)
            report.add("distance_to_ideal", trend.distance_to_ideal, n)
    except MetricPrecondition:
        raise
    except ValueError as exc:
        raise MetricPrecondition(str(exc)) from exc
    report.write_csv(args.out)
    for name, value, _ in report.rows:
        if not name.startswith("ratio_"):
            print(f"{name:<20}{value:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    cfg = _resolve(args)
    only = [name for item in args.only for name in item.split(",") if name]
    try:
        results = run_suite(only or None, seed=cfg["seed"], coords=args.coords)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_IO
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def _write_or_print(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def cmd_graph_inspect(args) -> int:
    from .graph import adjacency_grid, build_adjacency, degree_histogram
    from .metrics import read_tagf

    cfg = _resolve(args)
    g = build_adjacency(read_tagf(args.features), cfg["graph_threshold"])
    _write_or_print(args.grid, adjacency_grid(g) + "\n")
    hist = "degree,count\n" + "".join(f"{d},{c}\n" for d, c in degree_histogram(g))
    _write_or_print(args.hist, hist)
    return EXIT_OK


def cmd_graph_importance(args) -> int:
    from .matching import PageRankConfig, node_importance
    from .metrics import read_tagf

    cfg = _resolve(args)
    pr = PageRankConfig(cfg["pagerank_alpha"], cfg["pagerank_tol"], cfg["pagerank_max_iter"])
    scores = node_importance(read_tagf(args.features), cfg["graph_threshold"], pr)
    text = "node,score\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(scores.p.tolist()))
    _write_or_print(args.out, text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MetricPrecondition as exc:
        print(f"metric precondition failed: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (OSError, csv.Error) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # invalid key values rejected by the typed configs
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
