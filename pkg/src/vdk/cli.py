"""Command-line surface tying the pipeline together.

Commands: train-classifier, distill, debate-train, evaluate, explain,
ablate (plus `pipeline` to chain stages). Flags override config-file
values which override defaults. Exit codes: 0 ok, 2 configuration error,
3 missing dependency, 4 training diverged.
"""

from __future__ import annotations

import argparse
import sys

from vdk.config import parse_config
from vdk.errors import ConfigurationError, DependencyError, TrainingDivergedError
from vdk.pipeline import (
    RunPaths,
    run_ablation_grid,
    run_pipeline,
    stage_debate_train,
    stage_distill,
    stage_evaluate,
    stage_explain,
    stage_train_classifier,
)
from vdk.store import RunLock, atomic_write_text


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (INI-style sections)")
    parser.add_argument("--dataset", dest="run.dataset")
    parser.add_argument("--arch", dest="run.arch")
    parser.add_argument("--seed", dest="run.seed", type=int)
    parser.add_argument("--data-root", dest="run.data_root")
    parser.add_argument("--out", "--out-root", dest="run.out_root")


_FLAG_MAP = {
    # classifier
    "--epochs": ("classifier.epochs", int),
    "--lr": ("classifier.lr", float),
    "--wd": ("classifier.weight_decay", float),
    "--batch-size": ("classifier.batch_size", int),
    # codebook / distill
    "--codebook-size": ("codebook.size", int),
    "--metric": ("codebook.metric", str),
    "--hessian-beta": ("codebook.hessian_beta", float),
    "--distill-epochs": ("codebook.distill_epochs", int),
    # debate
    "--n": ("debate.n", int),
    "--tau": ("debate.tau", float),
    "--mode": ("debate.mode", str),
    "--allow-repeats": ("debate.allow_repeats", bool),
    "--mask-mode": ("debate.mask_mode", str),
    # players / training
    "--hidden-size": ("players.hidden_size", int),
    "--mc-samples": ("training.mc_samples", int),
    "--lambda1": ("training.lambda1", float),
    "--lambda2": ("training.lambda2", float),
    "--lambda3": ("training.lambda3", float),
    "--lambda-ad": ("training.lambda_ad", float),
    "--diversity-sign": ("training.diversity_sign", str),
    "--train-lr": ("training.lr", float),
    "--supportive-epochs": ("training.supportive_epochs", int),
    "--contrastive-epochs": ("training.contrastive_epochs", int),
    "--train-batch-size": ("training.batch_size", int),
    # shape generator sizing
    "--shape-classes": ("shape.classes", str),
    "--shape-train-per-class": ("shape.train_per_class", int),
    "--shape-val-per-class": ("shape.val_per_class", int),
    "--shape-test-per-class": ("shape.test_per_class", int),
}


def _add_override_flags(parser: argparse.ArgumentParser, flags) -> None:
    for flag in flags:
        dest, typ = _FLAG_MAP[flag]
        if typ is bool:
            parser.add_argument(flag, dest=dest, action="store_const", const=True)
        else:
            parser.add_argument(flag, dest=dest, type=typ)


def _collect_overrides(args: argparse.Namespace) -> dict:
    return {key: value for key, value in vars(args).items()
            if "." in key and value is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vdk",
        description="Visual debates over a classifier's quantized latent features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-classifier", help="train the continuous classifier")
    _add_common(p)
    _add_override_flags(p, ["--epochs", "--lr", "--wd", "--batch-size",
                            "--shape-classes", "--shape-train-per-class",
                            "--shape-val-per-class", "--shape-test-per-class"])

    p = sub.add_parser("distill", help="distill the codebook and surrogate head")
    _add_common(p)
    _add_override_flags(p, ["--codebook-size", "--metric", "--hessian-beta",
                            "--distill-epochs"])
    p.add_argument("--classifier", help="explicit classifier checkpoint path")

    p = sub.add_parser("debate-train", help="train the two debate players")
    _add_common(p)
    _add_override_flags(p, ["--n", "--tau", "--mode", "--allow-repeats",
                            "--mask-mode", "--hidden-size", "--mc-samples",
                            "--lambda1", "--lambda2", "--lambda3", "--lambda-ad",
                            "--diversity-sign", "--train-lr",
                            "--supportive-epochs", "--contrastive-epochs",
                            "--train-batch-size", "--codebook-size", "--metric"])
    p.add_argument("--phase", choices=["supportive", "contrastive", "both"],
                   default="both")

    p = sub.add_parser("evaluate", help="run eval debates and compute metrics")
    _add_common(p)
    _add_override_flags(p, ["--n", "--tau", "--mode", "--codebook-size", "--metric"])
    p.add_argument("--players-phase", choices=["supportive", "contrastive"],
                   default="contrastive")
    p.add_argument("--from-transcripts", help="score stored transcripts instead")
    p.add_argument("--force", action="store_true",
                   help="accept transcripts with a mismatched config hash")
    p.add_argument("--hypothesis2", action="store_true",
                   help="also report policy mass on the feature partition")

    p = sub.add_parser("explain", help="render one debate explanation figure")
    _add_common(p)
    _add_override_flags(p, ["--n", "--tau", "--mode", "--codebook-size", "--metric"])
    p.add_argument("--image", required=True, help="test-split image id")
    p.add_argument("--out-file", help="figure output path")
    p.add_argument("--players-phase", choices=["supportive", "contrastive"],
                   default="contrastive")

    p = sub.add_parser("ablate", help="run a metric grid over n/codebook/metric")
    _add_common(p)
    _add_override_flags(p, ["--tau", "--mode", "--supportive-epochs",
                            "--contrastive-epochs", "--mc-samples",
                            "--hidden-size", "--train-batch-size",
                            "--epochs", "--distill-epochs",
                            "--shape-train-per-class", "--shape-val-per-class",
                            "--shape-test-per-class"])
    p.add_argument("--n-grid", default="4,6,10")
    p.add_argument("--codebook-grid", default="64")
    p.add_argument("--metric-grid", default="euclidean")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--train-missing", action="store_true")
    p.add_argument("--extended", action="store_true",
                   help="allow compute-heavy cells (afhq, codebooks > 512)")

    p = sub.add_parser("pipeline", help="run several stages in order")
    _add_common(p)
    _add_override_flags(p, list(_FLAG_MAP))
    p.add_argument("--stages", default="train-classifier,distill,debate-train,evaluate")
    p.add_argument("--image", help="image id for an explain stage")

    return parser


def _ints(csv_text: str) -> list[int]:
    return [int(v) for v in csv_text.split(",") if v.strip()]


def _strs(csv_text: str) -> list[str]:
    return [v.strip() for v in csv_text.split(",") if v.strip()]


def _dispatch(args: argparse.Namespace) -> None:
    cfg = parse_config(args.config, _collect_overrides(args))
    paths = RunPaths(cfg)
    paths.ensure()
    if args.command == "ablate":
        sizes = _ints(args.codebook_grid)
        if not args.extended and (cfg.run.dataset == "afhq" or any(s > 512 for s in sizes)):
            raise ConfigurationError(
                "afhq and codebooks larger than 512 are compute-heavy; "
                "pass --extended to run them")
        run_ablation_grid(cfg, _ints(args.n_grid), sizes,
                          _strs(args.metric_grid), _ints(args.seeds),
                          train_missing=args.train_missing)
        return
    if args.command == "pipeline":
        run_pipeline(cfg, _strs(args.stages), explain_image=args.image)
        return
    with RunLock(paths.root):
        atomic_write_text(paths.root / "config.ini", cfg.echo())
        if args.command == "train-classifier":
            stage_train_classifier(cfg, paths)
        elif args.command == "distill":
            stage_distill(cfg, paths, classifier_path=args.classifier)
        elif args.command == "debate-train":
            stage_debate_train(cfg, paths, phases=args.phase)
        elif args.command == "evaluate":
            stage_evaluate(cfg, paths, phase=args.players_phase,
                           from_transcripts=args.from_transcripts,
                           force=args.force, with_hypothesis2=args.hypothesis2)
        elif args.command == "explain":
            stage_explain(cfg, paths, args.image, out_path=args.out_file,
                          phase=args.players_phase)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DependencyError, FileNotFoundError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
