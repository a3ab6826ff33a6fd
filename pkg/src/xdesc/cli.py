"""``xdesc`` command-line tool.

Every subcommand is a pure function of its inputs and ``--seed``; with
``--report`` it writes a versioned JSON report holding the resolved config,
metrics and timings. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import TrainConfig
from .descriptors import (
    CorrespondenceDataset,
    read_dataset,
    read_xdsc,
    write_dataset,
    write_xdsc,
)
from .errors import ConfigError, FormatError, ShapeError, XdescError
from .evaluate import (
    bank_translation_matrix,
    joint_recall_matrix,
    naive_recall_matrix,
    pair_translation_recall,
    summarize,
)
from .joint import encode, load_bank, save_bank, train_bank, translate_via_bank
from .losses import VARIANTS, LossConfig
from .matching import match_metrics, match_mutual_ratio
from .pair import load_pair, save_pair, train_pair, translate
from .scenarios import (
    DEFAULT_HIERARCHY,
    STRATEGIES,
    build_match_graph,
    build_tracks,
    count_correct,
    covisibility_stats,
    read_image_set,
    track_purity,
    write_image_set,
)
from .synthetic import default_family_config, families_from_config, gen_dataset, gen_latents, gen_multiview

REPORT_SCHEMA = "xdesc.report/1"
log = logging.getLogger("xdesc")


# ------------------------------------------------------------------ reports


def make_report(command: str, config: dict, metrics: dict, timings: dict) -> dict:
    return {"schema_version": REPORT_SCHEMA, "command": command, "config": config,
            "metrics": metrics, "timings": timings}


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def read_report(path: str | Path) -> dict:
    try:
        report = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    version = report.get("schema_version") if isinstance(report, dict) else None
    if version != REPORT_SCHEMA:
        raise FormatError(f"{path}: unknown report schema_version {version!r} (expected {REPORT_SCHEMA})")
    return report


def _config_of(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "report", "verbose")}


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, seed=args.seed)


# ---------------------------------------------------------------- commands


def cmd_gen(args: argparse.Namespace) -> dict:
    if args.families:
        config = json.loads(Path(args.families).read_text())
    else:
        config = default_family_config()
    if args.noise is not None:
        config = {**config, "noise_sigma": args.noise}
    families = families_from_config(config)
    latent_seed, noise_seed = _seeds(args.seed, 2)
    latents = gen_latents(args.n, families[0].latent_dim, latent_seed)
    out = Path(args.out)
    extra = {"families": config, "seed": args.seed, "n": args.n}
    if args.views:
        image_set = gen_multiview(latents, args.views, families, noise_seed, visibility=args.visibility)
        manifest = write_image_set(image_set, out, binary=args.binary)
        return {"manifest": str(manifest), "views": args.views, "gt_correspondences": image_set.gt_count()}
    dataset = gen_dataset(latents, families, noise_seed)
    manifest = write_dataset(dataset, out, binary=args.binary, extra=extra)
    return {"manifest": str(manifest), "algorithms": dataset.names, "n": len(dataset)}


def cmd_train_pair(args: argparse.Namespace) -> dict:
    dataset = read_dataset(args.data)
    model = train_pair(dataset, args.src, args.dst, _train_config(args))
    save_pair(model, args.out)
    return {"final_loss": model.final_loss, "batch": model.train_config["batch"], "n_train": len(dataset)}


def _algos(arg: str | None, dataset: CorrespondenceDataset) -> list[str]:
    if not arg:
        return list(dataset.names)
    names = [a.strip() for a in arg.split(",") if a.strip()]
    missing = [a for a in names if a not in dataset]
    if missing:
        raise ConfigError(f"--algos: dataset has no algorithm {missing[0]!r}")
    return names


def cmd_train_bank(args: argparse.Namespace) -> dict:
    dataset = read_dataset(args.data)
    names = _algos(args.algos, dataset)
    specs = [dataset[n].spec for n in names]
    loss_cfg = LossConfig(alpha=args.alpha, margin=args.margin, variant=args.variant)
    bank = train_bank(dataset.select(names), specs, loss_cfg, _train_config(args), embed_dim=args.embed_dim)
    save_bank(bank, args.out)
    return {"final_objective": bank.meta["final_objective"], "algorithms": names,
            "batch": bank.meta["train_config"]["batch"]}


def cmd_translate(args: argparse.Namespace) -> dict:
    descs = read_xdsc(args.inp)
    if args.model:
        out = translate(load_pair(args.model), descs, args.threshold)
    else:
        if not args.dst:
            raise ConfigError("--bank translation needs --dst")
        out = translate_via_bank(load_bank(args.bank), descs.spec.name, args.dst, descs, args.threshold)
    write_xdsc(out, args.out, binary=args.binary)
    return {"count": len(out), "src": descs.spec.name, "dst": out.spec.name}


def cmd_encode(args: argparse.Namespace) -> dict:
    descs = read_xdsc(args.inp)
    algo = args.algo or descs.spec.name
    out = encode(load_bank(args.bank), algo, descs)
    write_xdsc(out, args.out, binary=args.binary)
    return {"count": len(out), "embed_dim": out.spec.dim}


def cmd_match(args: argparse.Namespace) -> dict:
    a, b = read_xdsc(args.a), read_xdsc(args.b)
    if args.mode == "naive":
        if a.spec.dim != b.spec.dim or a.spec.metric != b.spec.metric:
            raise ShapeError(f"incompatible descriptor dimensions: {a.spec.name} is {a.spec.dim}-d "
                             f"{a.spec.metric}, {b.spec.name} is {b.spec.dim}-d {b.spec.metric}")
        va, vb, metric = a.values, b.values, a.spec.metric
    elif args.mode == "translate":
        if args.model:
            moved = translate(load_pair(args.model), a)
        elif args.bank:
            moved = translate_via_bank(load_bank(args.bank), a.spec.name, b.spec.name, a)
        else:
            raise ConfigError("--mode translate needs --model or --bank")
        va, vb, metric = moved.values, b.values, b.spec.metric
    else:
        if not args.bank:
            raise ConfigError("--mode embed needs --bank")
        bank = load_bank(args.bank)
        va = encode(bank, a.spec.name, a).values
        vb = encode(bank, b.spec.name, b).values
        metric = "l2"
    matches = match_mutual_ratio(va, vb, metric, args.ratio)
    if args.out:
        matches.write_tsv(args.out)
    return match_metrics(matches, a.patch_ids, b.patch_ids).to_dict()


def cmd_scenario(args: argparse.Namespace) -> dict:
    image_set = read_image_set(args.manifest)
    bank = load_bank(args.bank) if args.bank else None
    pair_models = {}
    for path in args.model or []:
        model = load_pair(path)
        pair_models[(model.src.name, model.dst.name)] = model
    hierarchy = tuple(args.hierarchy.split(",")) if args.hierarchy else DEFAULT_HIERARCHY
    graph = build_match_graph(image_set, args.strategy, bank, pair_models, args.ratio, hierarchy, args.threads)
    tracks = build_tracks(graph, image_set)
    stats = covisibility_stats(tracks, image_set.algorithms)
    n_multi = sum(1 for t in tracks.tracks if len(t.algos_present) >= 2)
    metrics = {
        "strategy": args.strategy,
        "matches": sum(len(pm.matches) for pm in graph),
        "correct_correspondences": count_correct(graph, image_set),
        "skipped_pairs": sum(pm.skipped for pm in graph),
        "n_tracks": len(tracks),
        "dropped_tracks": tracks.dropped,
        "multi_algorithm_fraction": n_multi / len(tracks),
        "track_purity": track_purity(tracks, image_set),
    }
    if args.stats_out:
        Path(args.stats_out).write_text(json.dumps({**stats, **metrics}, indent=2) + "\n")
    return {**metrics, "histogram": stats["histogram"]}


def cmd_eval(args: argparse.Namespace) -> dict:
    dataset = read_dataset(args.data)
    if args.mode == "naive":
        names = list(dataset.names)
        return summarize(naive_recall_matrix(dataset, names, args.ratio), names)
    if args.mode == "translate" and args.model:
        model = load_pair(args.model)
        return {"src": model.src.name, "dst": model.dst.name,
                "recall": pair_translation_recall(model, dataset, args.ratio)}
    if not args.bank:
        raise ConfigError(f"--mode {args.mode} needs --bank" + (" or --model" if args.mode == "translate" else ""))
    bank = load_bank(args.bank)
    if args.mode == "translate":
        return summarize(bank_translation_matrix(bank, dataset, ratio=args.ratio), bank.names)
    return summarize(joint_recall_matrix(bank, dataset, ratio=args.ratio), bank.names)


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--report", help="write a JSON report to this path")
    p.add_argument("--threads", type=int, default=None,
                   help="matching worker threads (default: $XDESC_THREADS or 1)")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=None, help="batch size (default: min(1024, n/64))")
    p.add_argument("--lr", type=float, default=1e-3)


def _ratio(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError("ratio must lie in (0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xdesc", description="Cross-descriptor translation and matching.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic descriptor families")
    _add_common(p)
    p.add_argument("--families", help="families JSON (default: built-in BRIEF/SIFT/HardNet/SOSNet stand-ins)")
    p.add_argument("--n", type=int, default=5000, help="number of latent patches")
    p.add_argument("--noise", type=float, default=None, help="override noise_sigma of the config")
    p.add_argument("--views", type=int, default=0, help="write a multi-view image set with this many views")
    p.add_argument("--visibility", type=float, default=1.0)
    p.add_argument("--binary", action="store_true", help="write binary XDSC files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-pair", help="train one directional translation network")
    _add_common(p)
    _add_training(p)
    p.add_argument("--data", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_pair)

    p = sub.add_parser("train-bank", help="train the joint encoder-decoder bank")
    _add_common(p)
    _add_training(p)
    p.add_argument("--data", required=True)
    p.add_argument("--algos", help="comma-separated algorithm names (default: all)")
    p.add_argument("--variant", default="quadratic", choices=list(VARIANTS) + ["auto-encoder"])
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_bank)

    p = sub.add_parser("translate", help="translate descriptors with a pair model or a bank")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--bank")
    p.add_argument("--dst", help="target algorithm (with --bank)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("encode", help="encode descriptors into the joint space")
    _add_common(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--algo", help="encoder to use (default: the file's algorithm)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("match", help="match two descriptor files")
    _add_common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--bank")
    group.add_argument("--model")
    p.add_argument("--mode", choices=["naive", "translate", "embed"], default="naive")
    p.add_argument("--ratio", type=_ratio, default=0.9)
    p.add_argument("--out", help="TSV of matches")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("scenario", help="collaborative mapping over a multi-view image set")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="embed")
    p.add_argument("--bank")
    p.add_argument("--model", action="append", help="pair model for progressive translation (repeatable)")
    p.add_argument("--hierarchy", help="comma-separated weak-to-strong family order")
    p.add_argument("--ratio", type=_ratio, default=0.9)
    p.add_argument("--stats-out", help="co-visibility statistics JSON")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("eval", help="held-out recall matrices")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["naive", "translate", "embed"], default="embed")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--bank")
    group.add_argument("--model")
    p.add_argument("--ratio", type=_ratio, default=None,
                   help="ratio test threshold (default: 1.0 for naive, else 0.9)")
    p.set_defaults(func=cmd_eval)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) == "eval" and args.ratio is None:
        args.ratio = 1.0 if args.mode == "naive" else 0.9
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    start = time.perf_counter()
    try:
        metrics = args.func(args)
    except (XdescError, OSError, json.JSONDecodeError) as exc:
        print(f"xdesc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - start
    report = make_report(args.command, _config_of(args), metrics, {"total_s": round(elapsed, 3)})
    if args.report:
        write_report(report, args.report)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
