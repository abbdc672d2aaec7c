"""Evaluation metrics over debate transcripts and the feature-partition check.

Completeness and faithfulness score the debate outcome against ground
truth and the classifier respectively; consensus asks how often both
players' final claims match the classifier; the split ratio measures how
the two players divide the codebook between them. The partition analysis
classifies each latent slot as semifactual (masking it leaves the
surrogate's class unchanged) or counterfactual (masking flips the class)
and checks how much policy mass each trained player puts on its side.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from typing import Callable, Iterable, NamedTuple, Sequence

import torch

from vdk.codebook import Codebook, QuantizedClassifier, QuantizedFeatureMap, q_predict
from vdk.debate import DebateConfig, DebateTranscript, rollout_debates
from vdk.errors import ContractError
from vdk.players import Player


def _require_nonempty(transcripts) -> None:
    if len(transcripts) == 0:
        raise ContractError("metric needs at least one transcript")


def completeness(transcripts: Sequence[DebateTranscript], labels: Sequence[int]) -> float:
    """Fraction of debates whose outcome equals the ground-truth label."""
    _require_nonempty(transcripts)
    if len(labels) != len(transcripts):
        raise ContractError("one label per transcript required")
    hits = sum(1 for t, y in zip(transcripts, labels) if t.debate_outcome == y)
    return hits / len(transcripts)


def faithfulness(transcripts: Sequence[DebateTranscript]) -> float:
    """Fraction of debates whose outcome equals the classifier's prediction."""
    _require_nonempty(transcripts)
    hits = sum(1 for t in transcripts if t.debate_outcome == t.classifier_pred)
    return hits / len(transcripts)


def consensus(transcripts: Sequence[DebateTranscript]) -> float:
    """Fraction of debates where both final claims equal the classifier's
    prediction."""
    _require_nonempty(transcripts)
    hits = sum(
        1 for t in transcripts
        if t.final_claims[0] == t.classifier_pred and t.final_claims[1] == t.classifier_pred
    )
    return hits / len(transcripts)


def _player_codes(transcript: DebateTranscript, player: int) -> set[int]:
    return {a.code_index for a in transcript.steps if a.player == player}


def split_ratio(transcripts: Sequence[DebateTranscript], scope: str = "corpus") -> float:
    """Share of uniquely sampled codebook entries attributable to player 1.

    ``corpus`` unions each player's codes across all transcripts before
    taking the ratio; ``per_image_mean`` averages per-transcript ratios.
    """
    _require_nonempty(transcripts)
    if scope == "corpus":
        z1: set[int] = set()
        z2: set[int] = set()
        for t in transcripts:
            z1 |= _player_codes(t, 1)
            z2 |= _player_codes(t, 2)
        if not z1 and not z2:
            raise ContractError("no arguments recorded in any transcript")
        return len(z1) / (len(z1) + len(z2))
    if scope == "per_image_mean":
        ratios = []
        for t in transcripts:
            z1, z2 = _player_codes(t, 1), _player_codes(t, 2)
            if not z1 and not z2:
                raise ContractError("transcript with no arguments")
            ratios.append(len(z1) / (len(z1) + len(z2)))
        return sum(ratios) / len(ratios)
    raise ContractError(f"unknown split-ratio scope {scope!r}")


def partition_features(q: QuantizedClassifier, zmap: QuantizedFeatureMap,
                       y: int) -> tuple[list[int], list[int]]:
    """Partition slots into semifactual and counterfactual sets.

    A slot is counterfactual when masking it alone flips the surrogate's
    predicted class, semifactual otherwise. ``y`` is the class under
    explanation; flips are measured against the surrogate's own unmasked
    prediction, which coincides with ``y`` whenever the surrogate agrees
    with the classifier. The two sets are disjoint and exhaustive.
    """
    ch = zmap.slot_count
    with torch.no_grad():
        base = int(q_predict(q, zmap, keep=None).argmax())
        # All leave-one-out pools at once: full sum minus each slot's vector.
        full_sum = zmap.vectors.sum(dim=0, keepdim=True)
        pools = (full_sum - zmap.vectors) / ch
        preds = q.probs(pools).argmax(dim=-1)
    semifactual, counterfactual = [], []
    for j in range(ch):
        (counterfactual if int(preds[j]) != base else semifactual).append(j)
    return semifactual, counterfactual


class Hypothesis2Score(NamedTuple):
    mass1_on_z1: float
    mass2_on_z2: float
    baseline1: float  # mean |z1| / ch
    baseline2: float  # mean |z2| / ch


def hypothesis2_score(players: tuple[Player, Player], dataset,
                      q: QuantizedClassifier, cb: Codebook,
                      debate_cfg: DebateConfig, seed: int = 0,
                      sample_size: int | None = None,
                      batch_size: int = 64) -> Hypothesis2Score:
    """Mean policy mass each player places on its hypothesized partition.

    Runs evaluation debates over (a sample of) the dataset and averages,
    over inputs and steps, player 1's policy mass on the semifactual slots
    and player 2's on the counterfactual slots, alongside the uniform
    baselines |z_i|/ch.
    """
    p1, p2 = players
    n_items = len(dataset)
    take = n_items if sample_size is None else min(sample_size, n_items)
    rng = torch.Generator().manual_seed(seed)
    mass1, mass2, base1, base2, count = 0.0, 0.0, 0.0, 0.0, 0
    for start in range(0, take, batch_size):
        idx = torch.arange(start, min(start + batch_size, take))
        vectors = dataset.vectors[idx]
        indices = dataset.indices[idx]
        preds = dataset.classifier_pred[idx]
        rollout = rollout_debates(p1, p2, q, vectors, indices, preds,
                                  debate_cfg, rng, select_mode="eval")
        ch = vectors.shape[1]
        for i in range(len(idx)):
            zmap = QuantizedFeatureMap(indices=indices[i], vectors=vectors[i])
            z1, z2 = partition_features(q, zmap, int(preds[i]))
            m1 = torch.zeros(ch, dtype=torch.bool)
            m1[z1] = True
            m2 = torch.zeros(ch, dtype=torch.bool)
            m2[z2] = True
            dists = rollout.policy_dists[i]  # (n, 2, ch)
            mass1 += float(dists[:, 0, :][:, m1].sum(dim=-1).mean())
            mass2 += float(dists[:, 1, :][:, m2].sum(dim=-1).mean())
            base1 += len(z1) / ch
            base2 += len(z2) / ch
            count += 1
    if count == 0:
        raise ContractError("hypothesis2_score needs at least one input")
    return Hypothesis2Score(mass1 / count, mass2 / count, base1 / count, base2 / count)


@dataclass
class MetricReport:
    """All four metrics for one configuration cell."""

    dataset: str
    arch: str
    metric: str
    n: int
    codebook_size: int
    mode: str
    seed_count: int
    sample_count: int
    completeness_mean: float
    completeness_var: float
    faithfulness_mean: float
    faithfulness_var: float
    consensus_mean: float
    consensus_var: float
    split_ratio_mean: float
    split_ratio_var: float


def compute_metrics(transcripts: Sequence[DebateTranscript],
                    labels: Sequence[int],
                    split_scope: str = "corpus") -> dict[str, float]:
    return {
        "completeness": completeness(transcripts, labels),
        "faithfulness": faithfulness(transcripts),
        "consensus": consensus(transcripts),
        "split_ratio": split_ratio(transcripts, scope=split_scope),
    }


def _mean_var(values: list[float]) -> tuple[float, float]:
    m = sum(values) / len(values)
    var = sum((v - m) ** 2 for v in values) / len(values)
    return m, var


def run_ablation(grid: Iterable[dict], seeds: Sequence[int],
                 runner: Callable[[dict, int], tuple[Sequence[DebateTranscript], Sequence[int]]],
                 split_scope: str = "corpus") -> list[MetricReport]:
    """Evaluate every grid cell over the given seeds.

    ``grid`` yields cells with keys (dataset, arch, metric, n,
    codebook_size, mode); ``runner(cell, seed)`` must return (transcripts,
    labels) for that cell, training or loading whatever it needs. Reports
    mean and variance over seeds per cell.
    """
    reports = []
    for cell in grid:
        per_seed = {"completeness": [], "faithfulness": [], "consensus": [],
                    "split_ratio": []}
        sample_count = 0
        for seed in seeds:
            transcripts, labels = runner(cell, seed)
            values = compute_metrics(transcripts, labels, split_scope=split_scope)
            for key in per_seed:
                per_seed[key].append(values[key])
            sample_count = len(transcripts)
        stats = {key: _mean_var(vals) for key, vals in per_seed.items()}
        reports.append(MetricReport(
            dataset=cell["dataset"], arch=cell["arch"], metric=cell["metric"],
            n=cell["n"], codebook_size=cell["codebook_size"], mode=cell["mode"],
            seed_count=len(seeds), sample_count=sample_count,
            completeness_mean=stats["completeness"][0],
            completeness_var=stats["completeness"][1],
            faithfulness_mean=stats["faithfulness"][0],
            faithfulness_var=stats["faithfulness"][1],
            consensus_mean=stats["consensus"][0],
            consensus_var=stats["consensus"][1],
            split_ratio_mean=stats["split_ratio"][0],
            split_ratio_var=stats["split_ratio"][1],
        ))
    return reports


def write_ablation_csv(reports: Sequence[MetricReport], path,
                       config_hash: str = "") -> None:
    fields = list(MetricReport.__dataclass_fields__) + ["config_hash"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for report in reports:
            row = {k: (f"{v:.6f}" if isinstance(v, float) else v)
                   for k, v in asdict(report).items()}
            row["config_hash"] = config_hash
            writer.writerow(row)
