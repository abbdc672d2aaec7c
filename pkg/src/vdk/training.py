"""Two-phase player training: supportive pre-training, then contrastive play.

Both phases run batched debate rollouts and update the players with the
score-function (REINFORCE) estimator, a learned per-step baseline, an
entropy regularizer pushing policies toward a few focused features and a
diversity term computed between the two players' argument sequences. In
the supportive phase both players optimize player 1's utility and their
claim heads are fit to the classifier's decision; the contrastive phase
drops the claim likelihood term and gives each player its own (zero-sum)
utility, realizing the min-max game.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from vdk.classifier import TrainedClassifier
from vdk.codebook import Codebook, QuantizedClassifier, quantize_batch
from vdk.datasets import DatasetSplit
from vdk.debate import DebateConfig, DebateRollout, rollout_debates
from vdk.errors import ConfigurationError, ContractError, TrainingDivergedError
from vdk.players import Player

PHASES = ("supportive", "contrastive")
DIVERSITY_SIGNS = ("paper", "flipped")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "supportive"
    mc_samples: int = 8
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.01
    lambda_ad: float = 0.5
    diversity_sign: str = "paper"
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigurationError(f"unknown phase {self.phase!r}")
        if self.mc_samples < 1:
            raise ConfigurationError("mc_samples must be >= 1")
        if self.diversity_sign not in DIVERSITY_SIGNS:
            raise ConfigurationError(f"unknown diversity sign {self.diversity_sign!r}")
        for name in ("lambda1", "lambda2", "lambda3", "lambda_ad"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")


def reinforce_loss(logprobs: torch.Tensor, utilities: torch.Tensor,
                   baselines: torch.Tensor) -> torch.Tensor:
    """Score-function surrogate loss for one player.

    ``logprobs`` and ``baselines`` are (episodes, steps), ``utilities``
    (episodes,). The advantage (utility minus per-step baseline) is treated
    as a constant: no gradient flows through it, so the baseline reduces
    variance without biasing the policy gradient.
    """
    if logprobs.shape != baselines.shape:
        raise ContractError("logprobs and baselines must have the same shape")
    advantage = (utilities.unsqueeze(-1) - baselines).detach()
    return -(logprobs * advantage).sum(dim=-1).mean()


def reinforce_loss_from_transcripts(transcripts, player: int) -> torch.Tensor:
    """Convenience wrapper computing the REINFORCE loss from finished
    transcripts (no graph; useful for checks and hand arithmetic)."""
    logprobs, baselines, utils = [], [], []
    for t in transcripts:
        own = [a for a in t.steps if a.player == player]
        logprobs.append([a.logprob for a in own])
        baselines.append([a.baseline for a in own])
        utils.append(t.utilities[player - 1])
    return reinforce_loss(torch.tensor(logprobs), torch.tensor(utils, dtype=torch.float),
                          torch.tensor(baselines))


def argument_entropy(dist: torch.Tensor) -> torch.Tensor:
    """Shannon entropy of a feature distribution, with 0*log 0 = 0."""
    logp = torch.where(dist > 0, torch.log(dist.clamp_min(1e-30)),
                       torch.zeros_like(dist))
    return -(dist * logp).sum(dim=-1)


def argument_diversity(args1: torch.Tensor, args2: torch.Tensor,
                       lambda_ad: float) -> torch.Tensor:
    """Inter-player argument variance minus weighted intra-player variance.

    Both inputs are (n, d) argument-vector sequences (or (B, n, d) batches,
    reduced per episode then averaged). Each term is a mean squared
    deviation over steps and coordinates against the opposing (or own)
    sequence mean.
    """
    if args1.shape != args2.shape:
        raise ContractError("argument sequences must have matching shapes")
    if args1.dim() == 2:
        args1, args2 = args1.unsqueeze(0), args2.unsqueeze(0)
    mean1 = args1.mean(dim=1, keepdim=True)
    mean2 = args2.mean(dim=1, keepdim=True)
    inter = ((mean1 - args2) ** 2).mean(dim=(1, 2)) + ((args1 - mean2) ** 2).mean(dim=(1, 2))
    intra = ((args1 - mean1) ** 2).mean(dim=(1, 2)) + ((args2 - mean2) ** 2).mean(dim=(1, 2))
    return (inter - lambda_ad * intra).mean()


@dataclass
class DebateDataset:
    """Frozen quantized features and classifier decisions for a split."""

    vectors: torch.Tensor          # (N, ch, d)
    indices: torch.Tensor          # (N, ch)
    classifier_pred: torch.Tensor  # (N,)
    labels: torch.Tensor           # (N,)
    image_ids: list[str]

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


def prepare_debate_dataset(classifier: TrainedClassifier, q: QuantizedClassifier,
                           cb: Codebook, split: DatasetSplit,
                           batch_size: int = 256) -> DebateDataset:
    """Quantize a split once against the frozen codebook."""
    x, y = split.stack()
    classifier.net.eval()
    vecs, idxs, preds = [], [], []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = x[start:start + batch_size]
            fmap = classifier.f(xb)
            preds.append(classifier.g(fmap).argmax(dim=-1))
            v, i = quantize_batch(fmap, cb)
            vecs.append(v)
            idxs.append(i)
    return DebateDataset(
        vectors=torch.cat(vecs),
        indices=torch.cat(idxs),
        classifier_pred=torch.cat(preds),
        labels=y,
        image_ids=[item.id for item in split.items],
    )


def _diversity_coefficient(phase: str, cfg: TrainConfig) -> float:
    """Sign of the diversity term in the minimized loss.

    The published combined losses subtract the (negated) diversity term in
    the supportive phase and add it in the contrastive phase, which works
    out to +lambda3*AD and -lambda3*AD respectively; ``flipped`` negates
    both so diversity is always encouraged.
    """
    sign = 1.0 if phase == "supportive" else -1.0
    if cfg.diversity_sign == "flipped":
        sign = -sign
    return sign * cfg.lambda3


def _player_losses(rollout: DebateRollout, cfg: TrainConfig, phase: str):
    """Per-player losses for one batch of rollouts; returns (loss, stats)."""
    total = 0.0
    stats = {}
    div_coeff = _diversity_coefficient(phase, cfg)
    diversity = argument_diversity(
        rollout.expected_vectors[:, :, 0, :],
        rollout.expected_vectors[:, :, 1, :],
        cfg.lambda_ad,
    )
    for p in (0, 1):
        # Supportive: both players chase player 1's utility.
        util = rollout.utilities[:, 0] if phase == "supportive" else rollout.utilities[:, p]
        util = util.float()
        logprobs = rollout.logprobs[:, :, p]
        baselines = rollout.baselines[:, :, p]
        rf = reinforce_loss(logprobs, util, baselines)
        entropy = rollout.entropies[:, :, p].sum(dim=1).mean()
        baseline_mse = F.mse_loss(baselines, util.unsqueeze(-1).expand_as(baselines).detach())
        loss = rf + cfg.lambda2 * entropy + baseline_mse
        if phase == "supportive":
            nll = F.cross_entropy(rollout.claim_logits[:, p, :],
                                  rollout.classifier_pred)
            loss = loss + cfg.lambda1 * nll
            stats[f"nll{p + 1}"] = nll.item()
        total = total + loss
        stats[f"reinforce{p + 1}"] = rf.item()
        stats[f"entropy{p + 1}"] = entropy.item()
        stats[f"baseline_mse{p + 1}"] = baseline_mse.item()
    total = total + div_coeff * diversity
    stats["diversity"] = diversity.item()
    return total, stats


def _freeze(module: torch.nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def _train_phase(
    p1: Player,
    p2: Player,
    q: QuantizedClassifier,
    cb: Codebook,
    dataset: DebateDataset,
    cfg: TrainConfig,
    debate_cfg: DebateConfig,
    phase: str,
    log_fn=None,
) -> list[dict]:
    """Shared training loop; returns per-epoch history rows."""
    _freeze(q)
    _freeze(cb)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt1 = torch.optim.Adam(p1.parameters(), lr=cfg.lr)
    opt2 = torch.optim.Adam(p2.parameters(), lr=cfg.lr)
    n_items = len(dataset)
    history = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n_items, generator=gen)
        epoch_stats: dict[str, float] = {}
        unique1: set[int] = set()
        unique2: set[int] = set()
        util_sum, ep_count, batches = 0.0, 0, 0
        for start in range(0, n_items, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rep = idx.repeat_interleave(cfg.mc_samples)
            rollout = rollout_debates(
                p1, p2, q,
                dataset.vectors[rep], dataset.indices[rep],
                dataset.classifier_pred[rep],
                debate_cfg, gen, select_mode="train",
            )
            loss, stats = _player_losses(rollout, cfg, phase)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"{phase} loss became non-finite at epoch {epoch}", epoch=epoch)
            opt1.zero_grad()
            opt2.zero_grad()
            loss.backward()
            opt1.step()
            opt2.step()

            util_sum += float(rollout.utilities[:, 0].float().sum())
            ep_count += rollout.batch
            unique1.update(rollout.code_indices[:, :, 0].flatten().tolist())
            unique2.update(rollout.code_indices[:, :, 1].flatten().tolist())
            for key, value in stats.items():
                epoch_stats[key] = epoch_stats.get(key, 0.0) + value
            batches += 1
        row = {key: value / max(1, batches) for key, value in epoch_stats.items()}
        row["epoch"] = epoch
        row["phase"] = phase
        row["mean_utility1"] = util_sum / max(1, ep_count)
        denom = len(unique1) + len(unique2)
        row["split_ratio"] = len(unique1) / denom if denom else 0.0
        history.append(row)
        if log_fn is not None:
            log_fn(row)
    return history


def train_supportive(players: tuple[Player, Player], q: QuantizedClassifier,
                     cb: Codebook, dataset: DebateDataset, cfg: TrainConfig,
                     debate_cfg: DebateConfig, log_fn=None):
    """Pre-debate phase: both players learn to support the classifier.

    Both players' policies are reinforced with player 1's utility, claim
    heads are fit to the classifier's decision by cross-entropy, and
    baseline heads regress the utility each player optimizes.
    """
    p1, p2 = players
    history = _train_phase(p1, p2, q, cb, dataset, cfg, debate_cfg,
                           phase="supportive", log_fn=log_fn)
    return players, history


def train_contrastive(players: tuple[Player, Player], q: QuantizedClassifier,
                      cb: Codebook, dataset: DebateDataset, cfg: TrainConfig,
                      debate_cfg: DebateConfig, log_fn=None):
    """The actual debate: each player optimizes its own zero-sum utility;
    no claim-likelihood term, preserving the min-max structure."""
    p1, p2 = players
    history = _train_phase(p1, p2, q, cb, dataset, cfg, debate_cfg,
                           phase="contrastive", log_fn=log_fn)
    return players, history
