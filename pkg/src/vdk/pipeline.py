"""End-to-end stages: train-classifier -> distill -> debate-train ->
evaluate -> explain, plus the ablation grid runner.

Each stage reads its inputs from the run's output directory, writes its
artifact atomically and embeds the effective config hash so later stages
can refuse stale inputs. Stages are resumable: an existing artifact with
the right hash is reused unless ``force`` is set.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import asdict
from pathlib import Path

import torch

from vdk import classifier as clf
from vdk import metrics as met
from vdk.codebook import (
    Codebook,
    DistillHParams,
    QuantizedClassifier,
    distill,
    distill_agreement,
    init_codebook,
)
from vdk.config import RunConfig
from vdk.datasets import DatasetSplit, ShapeConfig, load_dataset
from vdk.debate import (
    DebateConfig,
    load_transcripts,
    rollout_debates,
    rollout_to_transcripts,
    run_debate,
    save_transcripts,
    transcript_config_hashes,
)
from vdk.errors import ConfigurationError, DependencyError
from vdk.metrics import MetricReport, compute_metrics, hypothesis2_score, write_ablation_csv
from vdk.players import Player, build_players
from vdk.store import RunLock, atomic_write_text, load_checkpoint, save_checkpoint
from vdk.training import (
    DebateDataset,
    TrainConfig,
    prepare_debate_dataset,
    train_contrastive,
    train_supportive,
)
from vdk.viz import render_debate

STAGES = ("train-classifier", "distill", "debate-train", "evaluate", "explain")


class RunPaths:
    def __init__(self, cfg: RunConfig):
        self.root = cfg.out_dir()
        self.checkpoints = self.root / "checkpoints"
        self.transcripts = self.root / "transcripts"
        self.figures = self.root / "figures"
        self.reports = self.root / "reports"

    @property
    def classifier(self) -> Path:
        return self.checkpoints / "classifier.ckpt"

    @property
    def codebook(self) -> Path:
        return self.checkpoints / "codebook.ckpt"

    def players(self, phase: str) -> Path:
        return self.checkpoints / f"players_{phase}.ckpt"

    def ensure(self) -> None:
        for d in (self.checkpoints, self.transcripts, self.figures, self.reports):
            d.mkdir(parents=True, exist_ok=True)


def _shape_config(cfg: RunConfig, split: str) -> ShapeConfig:
    per_class = {
        "train": cfg.shape.train_per_class,
        "val": cfg.shape.val_per_class,
        "test": cfg.shape.test_per_class,
    }[split]
    return ShapeConfig(classes=cfg.shape.class_tuple(), per_class=per_class)


def load_split(cfg: RunConfig, split: str) -> DatasetSplit:
    return load_dataset(
        cfg.run.dataset, split, cfg.run.data_root,
        shape_config=_shape_config(cfg, split) if cfg.run.dataset == "shape" else None,
        shape_seed=cfg.run.seed,
    )


def _input_shape(cfg: RunConfig) -> tuple[int, int, int]:
    return (3, 128, 128) if cfg.run.dataset == "afhq" else (1, 32, 32)


def classifier_spec(cfg: RunConfig, class_count: int) -> clf.ClassifierSpec:
    return clf.ClassifierSpec(
        arch=cfg.run.arch,
        class_count=class_count,
        input_shape=_input_shape(cfg),
        train_hparams=clf.TrainHParams(
            lr=cfg.classifier.lr,
            weight_decay=cfg.classifier.weight_decay,
            epochs=cfg.classifier.epochs,
            batch_size=cfg.classifier.batch_size,
        ),
        conv_depth=cfg.classifier.conv_depth,
    )


def stage_train_classifier(cfg: RunConfig, paths: RunPaths, log=print) -> Path:
    train = load_split(cfg, "train")
    val = load_split(cfg, "val")
    test = load_split(cfg, "test")
    spec = classifier_spec(cfg, train.class_count)
    torch.manual_seed(cfg.run.seed)
    model = clf.build_classifier(spec)
    clf.train_classifier(model, train, val, spec, seed=cfg.run.seed)
    model.test_accuracy = clf.evaluate_accuracy(model, test)
    log(f"[train-classifier] test accuracy {model.test_accuracy:.4f}")
    save_checkpoint(
        paths.classifier,
        header={
            "kind": "classifier",
            "arch": spec.arch,
            "class_count": spec.class_count,
            "input_shape": list(spec.input_shape),
            "conv_depth": spec.conv_depth,
            "accuracy": model.test_accuracy,
            "seed": cfg.run.seed,
            "config_hash": cfg.config_hash(),
        },
        payload={"state_dict": model.net.state_dict(),
                 "train_hparams": asdict(spec.train_hparams)},
    )
    return paths.classifier


def load_classifier(cfg: RunConfig, paths: RunPaths) -> clf.TrainedClassifier:
    if not paths.classifier.exists():
        raise DependencyError(f"missing classifier checkpoint {paths.classifier}; "
                              "run the train-classifier stage first")
    return _load_classifier_file(paths.classifier)


def _load_classifier_file(path: Path) -> clf.TrainedClassifier:
    header, payload = load_checkpoint(path)
    spec = clf.ClassifierSpec(
        arch=header["arch"],
        class_count=header["class_count"],
        input_shape=tuple(header["input_shape"]),
        train_hparams=clf.TrainHParams(**payload["train_hparams"]),
        conv_depth=header.get("conv_depth", 7),
    )
    model = clf.build_classifier(spec)
    model.net.load_state_dict(payload["state_dict"])
    model.net.eval()
    model.test_accuracy = header["accuracy"]
    return model


def stage_distill(cfg: RunConfig, paths: RunPaths, log=print,
                  classifier_path: str | Path | None = None) -> Path:
    if classifier_path is not None:
        alt_path = Path(classifier_path)
        if not alt_path.exists():
            raise DependencyError(f"missing classifier checkpoint {alt_path}")
        model = _load_classifier_file(alt_path)
    else:
        model = load_classifier(cfg, paths)
    ch, h, w = model.feature_shape()
    cb = init_codebook(cfg.codebook.size, h * w, cfg.codebook.metric,
                       seed=cfg.run.seed)
    q = QuantizedClassifier(h * w, model.spec.class_count)
    torch.manual_seed(cfg.run.seed + 1)
    train = load_split(cfg, "train")
    hp = DistillHParams(
        lr=cfg.codebook.distill_lr,
        epochs=cfg.codebook.distill_epochs,
        batch_size=cfg.codebook.distill_batch_size,
        commitment=cfg.codebook.commitment,
        hessian_beta=cfg.codebook.hessian_beta,
        hessian_probes=cfg.codebook.hessian_probes,
        hessian_eps=cfg.codebook.hessian_eps,
        seed=cfg.run.seed,
    )
    distill(model, q, cb, train, hp)
    val = load_split(cfg, "val")
    agreement = distill_agreement(model, q, cb, val)
    log(f"[distill] held-out agreement with classifier {agreement:.4f}")
    save_checkpoint(
        paths.codebook,
        header={
            "kind": "codebook",
            "n_entries": cb.n_entries,
            "dim": cb.dim,
            "metric": cb.metric,
            "slot_count": ch,
            "latent_hw": [h, w],
            "class_count": model.spec.class_count,
            "agreement": agreement,
            "seed": cfg.run.seed,
            "config_hash": cfg.config_hash(),
        },
        payload={"codebook": cb.state_dict(), "q": q.state_dict()},
    )
    return paths.codebook


def load_codebook(cfg: RunConfig, paths: RunPaths):
    if not paths.codebook.exists():
        raise DependencyError(f"missing codebook checkpoint {paths.codebook}; "
                              "run the distill stage first")
    header, payload = load_checkpoint(paths.codebook)
    cb = Codebook(header["n_entries"], header["dim"], header["metric"])
    cb.load_state_dict(payload["codebook"])
    q = QuantizedClassifier(header["dim"], header["class_count"])
    q.load_state_dict(payload["q"])
    return q, cb, header


def debate_config(cfg: RunConfig) -> DebateConfig:
    return DebateConfig(
        n=cfg.debate.n, tau=cfg.debate.tau, mode=cfg.debate.mode,
        allow_repeats=cfg.debate.allow_repeats, mask_mode=cfg.debate.mask_mode,
    )


def train_config(cfg: RunConfig, phase: str) -> TrainConfig:
    epochs = (cfg.training.supportive_epochs if phase == "supportive"
              else cfg.training.contrastive_epochs)
    return TrainConfig(
        phase=phase, mc_samples=cfg.training.mc_samples,
        lambda1=cfg.training.lambda1, lambda2=cfg.training.lambda2,
        lambda3=cfg.training.lambda3, lambda_ad=cfg.training.lambda_ad,
        diversity_sign=cfg.training.diversity_sign, lr=cfg.training.lr,
        epochs=epochs, batch_size=cfg.training.batch_size, seed=cfg.run.seed,
    )


def _save_players(cfg: RunConfig, paths: RunPaths, p1: Player, p2: Player,
                  phase: str, header_extra: dict) -> Path:
    path = paths.players(phase)
    save_checkpoint(
        path,
        header={
            "kind": "players",
            "phase": phase,
            "hidden_size": p1.hidden_size,
            "slot_count": p1.slot_count,
            "feature_dim": p1.feature_dim,
            "class_count": p1.class_count,
            "seed": cfg.run.seed,
            "config_hash": cfg.config_hash(),
            **header_extra,
        },
        payload={"p1": p1.state_dict(), "p2": p2.state_dict()},
    )
    return path


def load_players(cfg: RunConfig, paths: RunPaths, phase: str) -> tuple[Player, Player]:
    path = paths.players(phase)
    if not path.exists():
        raise DependencyError(f"missing players checkpoint {path}; "
                              "run the debate-train stage first")
    header, payload = load_checkpoint(path)
    p1 = Player(header["slot_count"], header["feature_dim"],
                header["class_count"], header["hidden_size"])
    p2 = Player(header["slot_count"], header["feature_dim"],
                header["class_count"], header["hidden_size"])
    p1.load_state_dict(payload["p1"])
    p2.load_state_dict(payload["p2"])
    return p1, p2


def _write_curves(paths: RunPaths, history: list[dict]) -> None:
    if not history:
        return
    keys = ["phase", "epoch", "reinforce1", "reinforce2", "nll1", "nll2",
            "entropy1", "entropy2", "baseline_mse1", "baseline_mse2",
            "diversity", "mean_utility1", "split_ratio"]
    path = paths.reports / "training_curves.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                             for k, v in row.items()})


def stage_debate_train(cfg: RunConfig, paths: RunPaths, phases: str = "both",
                       log=print) -> Path:
    model = load_classifier(cfg, paths)
    q, cb, cb_header = load_codebook(cfg, paths)
    train = load_split(cfg, "train")
    dataset = prepare_debate_dataset(model, q, cb, train)
    dcfg = debate_config(cfg)
    history: list[dict] = []

    def epoch_log(row):
        history.append(row)
        log(f"[debate-train/{row['phase']}] epoch {row['epoch']} "
            f"utility1 {row['mean_utility1']:.3f} split {row['split_ratio']:.3f}")

    if phases in ("supportive", "both"):
        players = build_players(cb_header["slot_count"], cb.dim,
                                cb_header["class_count"],
                                hidden_size=cfg.players.hidden_size,
                                seed=cfg.run.seed)
        players, _ = train_supportive(players, q, cb, dataset,
                                      train_config(cfg, "supportive"), dcfg,
                                      log_fn=epoch_log)
        _save_players(cfg, paths, *players, phase="supportive",
                      header_extra={"n": dcfg.n, "tau": dcfg.tau, "mode": dcfg.mode})
    if phases in ("contrastive", "both"):
        players = load_players(cfg, paths, "supportive")
        players, _ = train_contrastive(players, q, cb, dataset,
                                       train_config(cfg, "contrastive"), dcfg,
                                       log_fn=epoch_log)
        _save_players(cfg, paths, *players, phase="contrastive",
                      header_extra={"n": dcfg.n, "tau": dcfg.tau, "mode": dcfg.mode})
    _write_curves(paths, history)
    return paths.players("contrastive" if phases in ("contrastive", "both")
                         else "supportive")


def evaluate_transcripts(cfg: RunConfig, paths: RunPaths, split: str = "test",
                         phase: str = "contrastive", batch_size: int = 64):
    """Run eval-mode debates over a split; returns (transcripts, labels)."""
    model = load_classifier(cfg, paths)
    q, cb, _ = load_codebook(cfg, paths)
    p1, p2 = load_players(cfg, paths, phase)
    data = load_split(cfg, split)
    dataset = prepare_debate_dataset(model, q, cb, data)
    dcfg = debate_config(cfg)
    rng = torch.Generator().manual_seed(cfg.run.seed + 97)
    transcripts = []
    for start in range(0, len(dataset), batch_size):
        end = min(start + batch_size, len(dataset))
        rollout = rollout_debates(
            p1, p2, q,
            dataset.vectors[start:end], dataset.indices[start:end],
            dataset.classifier_pred[start:end], dcfg, rng, select_mode="eval")
        transcripts.extend(rollout_to_transcripts(
            rollout, dcfg, dataset.image_ids[start:end]))
    return transcripts, dataset.labels.tolist(), dataset


def _metrics_report(cfg: RunConfig, values: dict, sample_count: int) -> MetricReport:
    return MetricReport(
        dataset=cfg.run.dataset, arch=cfg.run.arch, metric=cfg.codebook.metric,
        n=cfg.debate.n, codebook_size=cfg.codebook.size, mode=cfg.debate.mode,
        seed_count=1, sample_count=sample_count,
        completeness_mean=values["completeness"], completeness_var=0.0,
        faithfulness_mean=values["faithfulness"], faithfulness_var=0.0,
        consensus_mean=values["consensus"], consensus_var=0.0,
        split_ratio_mean=values["split_ratio"], split_ratio_var=0.0,
    )


def stage_evaluate(cfg: RunConfig, paths: RunPaths, phase: str = "contrastive",
                   from_transcripts: str | Path | None = None,
                   force: bool = False, with_hypothesis2: bool = False,
                   log=print) -> dict:
    if from_transcripts is not None:
        transcripts = load_transcripts(from_transcripts)
        hashes = transcript_config_hashes(from_transcripts)
        if not force and hashes - {cfg.config_hash()}:
            raise ConfigurationError(
                f"transcripts in {from_transcripts} carry config hash(es) "
                f"{sorted(hashes)} but the current config hashes to "
                f"{cfg.config_hash()}; pass force to evaluate anyway")
        data = load_split(cfg, "test")
        by_id = {item.id: item.label for item in data.items}
        labels = [by_id[t.image_id] for t in transcripts]
        dataset = None
    else:
        transcripts, labels, dataset = evaluate_transcripts(cfg, paths, phase=phase)
        save_transcripts(transcripts, paths.transcripts / f"test_{phase}.jsonl",
                         config_hash=cfg.config_hash())
    values = compute_metrics(transcripts, labels)
    values["split_ratio_per_image"] = met.split_ratio(transcripts, "per_image_mean")
    report = _metrics_report(cfg, values, len(transcripts))
    write_ablation_csv([report], paths.reports / f"metrics_{phase}.csv",
                       config_hash=cfg.config_hash())
    if with_hypothesis2 and dataset is not None:
        q, cb, _ = load_codebook(cfg, paths)
        players = load_players(cfg, paths, phase)
        h2 = hypothesis2_score(players, dataset, q, cb, debate_config(cfg),
                               seed=cfg.run.seed, sample_size=256)
        values.update({"mass1_on_z1": h2.mass1_on_z1, "mass2_on_z2": h2.mass2_on_z2,
                       "baseline1": h2.baseline1, "baseline2": h2.baseline2})
    for key, value in values.items():
        log(f"[evaluate/{phase}] {key} = {value:.4f}")
    return values


def stage_explain(cfg: RunConfig, paths: RunPaths, image_id: str,
                  out_path: str | Path | None = None,
                  phase: str = "contrastive", log=print) -> Path:
    model = load_classifier(cfg, paths)
    q, cb, cb_header = load_codebook(cfg, paths)
    p1, p2 = load_players(cfg, paths, phase)
    data = load_split(cfg, "test")
    matches = [item for item in data.items if item.id == image_id]
    if not matches:
        raise ConfigurationError(f"image id {image_id!r} not found in the test split")
    item = matches[0]
    dataset = prepare_debate_dataset(
        model, q, cb,
        DatasetSplit(name="one", items=[item], class_count=data.class_count))
    from vdk.codebook import QuantizedFeatureMap

    zmap = QuantizedFeatureMap(indices=dataset.indices[0],
                               vectors=dataset.vectors[0], source_id=item.id)
    rng = torch.Generator().manual_seed(cfg.run.seed + 131)
    transcript = run_debate(p1, p2, zmap, q, debate_config(cfg), rng,
                            classifier_pred=int(dataset.classifier_pred[0]))
    out = Path(out_path) if out_path else paths.figures / f"{image_id}.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    render_debate(transcript, item.pixels, out,
                  latent_shape=tuple(cb_header["latent_hw"]), cb=cb)
    save_transcripts([transcript], out.with_suffix(".json"),
                     config_hash=cfg.config_hash())
    log(f"[explain] wrote {out} and {out.with_suffix('.json')}")
    return out


def run_pipeline(cfg: RunConfig, stages, explain_image: str | None = None,
                 log=print) -> None:
    """Execute the requested stages in dependency order under the run lock."""
    order = [s for s in STAGES if s in set(stages)]
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ConfigurationError(f"unknown stages {sorted(unknown)}")
    paths = RunPaths(cfg)
    paths.ensure()
    with RunLock(paths.root):
        atomic_write_text(paths.root / "config.ini", cfg.echo())
        for stage in order:
            if stage == "train-classifier":
                stage_train_classifier(cfg, paths, log=log)
            elif stage == "distill":
                stage_distill(cfg, paths, log=log)
            elif stage == "debate-train":
                stage_debate_train(cfg, paths, log=log)
            elif stage == "evaluate":
                stage_evaluate(cfg, paths, log=log)
            elif stage == "explain":
                if explain_image is None:
                    data = load_split(cfg, "test")
                    explain_image = data.items[0].id
                stage_explain(cfg, paths, explain_image, log=log)


def run_ablation_grid(cfg: RunConfig, n_values, codebook_sizes, metrics_list,
                      seeds, train_missing: bool = False, log=print) -> Path:
    """Reproduce the ablation tables over (n, codebook size, metric) cells."""
    grid = []
    for metric in metrics_list:
        for size in codebook_sizes:
            for n in n_values:
                grid.append({
                    "dataset": cfg.run.dataset, "arch": cfg.run.arch,
                    "metric": metric, "n": n, "codebook_size": size,
                    "mode": cfg.debate.mode,
                })

    def runner(cell, seed):
        cell_cfg = copy.deepcopy(cfg)
        cell_cfg.run.seed = seed
        cell_cfg.debate.n = cell["n"]
        cell_cfg.codebook.size = cell["codebook_size"]
        cell_cfg.codebook.metric = cell["metric"]
        cell_cfg.validate()
        cell_paths = RunPaths(cell_cfg)
        cell_paths.ensure()
        needed = [cell_paths.classifier, cell_paths.codebook,
                  cell_paths.players("contrastive")]
        missing = [p for p in needed if not p.exists()]
        if missing and not train_missing:
            raise ConfigurationError(
                f"missing checkpoints {missing}; rerun with train_missing")
        if missing:
            log(f"[ablate] training cell {cell} seed {seed}")
            with RunLock(cell_paths.root):
                atomic_write_text(cell_paths.root / "config.ini", cell_cfg.echo())
                if not cell_paths.classifier.exists():
                    stage_train_classifier(cell_cfg, cell_paths, log=log)
                if not cell_paths.codebook.exists():
                    stage_distill(cell_cfg, cell_paths, log=log)
                if not cell_paths.players("contrastive").exists():
                    stage_debate_train(cell_cfg, cell_paths, log=log)
        transcripts, labels, _ = evaluate_transcripts(cell_cfg, cell_paths)
        return transcripts, labels

    reports = met.run_ablation(grid, seeds, runner)
    paths = RunPaths(cfg)
    paths.ensure()
    out = paths.reports / "ablation.csv"
    write_ablation_csv(reports, out, config_hash=cfg.config_hash())
    log(f"[ablate] wrote {out}")
    return out
