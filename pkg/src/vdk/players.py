"""Learned debaters: recurrent backbone, policy, modulator, baseline, claim.

Each player owns five networks (Fig.-3 style): a modulator embedding
argument vectors into the hidden dimension, a GRU cell accumulating the
argument sequence, a policy head scoring which latent slot to argue next,
a baseline head estimating the episode utility for variance reduction, and
a claim head mapping the final hidden state to a class. The two players of
a debate are independent instances sharing no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from vdk.errors import ContractError

DEFAULT_HIDDEN_SIZE = 256


@dataclass
class PlayerState:
    """Per-debate mutable state: hidden vector and the played-slot mask."""

    h: torch.Tensor            # (B, H)
    played_mask: torch.Tensor  # (B, ch) bool; True = already argued


class Player(nn.Module):
    """One debater's parameter bundle.

    Args:
        slot_count: number of latent channels (the policy's action space).
        feature_dim: dimension d of one quantized feature vector.
        class_count: number of classes N.
        hidden_size: GRU hidden dimension shared by all heads.
    """

    def __init__(self, slot_count: int, feature_dim: int, class_count: int,
                 hidden_size: int = DEFAULT_HIDDEN_SIZE):
        super().__init__()
        self.slot_count = slot_count
        self.feature_dim = feature_dim
        self.class_count = class_count
        self.hidden_size = hidden_size
        # Bias-free so an absent argument contributes an exact zero.
        self.modulator = nn.Linear(feature_dim, hidden_size, bias=False)
        self.backbone = nn.GRUCell(hidden_size, hidden_size)
        self.policy = nn.Sequential(
            nn.Linear(hidden_size + feature_dim + class_count, hidden_size),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_size, slot_count),
        )
        self.baseline = nn.Linear(hidden_size, 1)
        self.claim = nn.Linear(hidden_size, class_count)

    def initial_hidden(self, batch: int, rng: torch.Generator) -> torch.Tensor:
        """Small random initial hidden state, reproducible from ``rng``."""
        return 0.01 * torch.randn(batch, self.hidden_size, generator=rng)

    def modulate(self, own_arg: torch.Tensor | None,
                 opp_arg: torch.Tensor | None, batch: int = 1) -> torch.Tensor:
        """Embed the two step arguments into the hidden dimension.

        Each present argument is mapped through the shared modulator
        (linear + ReLU) and the embeddings are summed; absent arguments
        contribute an exact zero, so ``e(a, b) = e(a, None) + e(None, b)``
        and ``e(None, None) = 0``. ``batch`` sizes the output only when
        both arguments are absent.
        """
        parts = [F.relu(self.modulator(arg)) for arg in (own_arg, opp_arg)
                 if arg is not None]
        if not parts:
            return torch.zeros(batch, self.hidden_size)
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    def step_backbone(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        """One GRU update of the hidden state with the modulated arguments."""
        return self.backbone(e, h)

    def policy_distribution(self, h: torch.Tensor, pooled_state: torch.Tensor,
                            yhat: torch.Tensor, played_mask: torch.Tensor) -> torch.Tensor:
        """Categorical distribution over slots.

        Conditions on the hidden state, the pooled masked environment and
        the quantized classifier's decision (one-hot). Already-played slots
        get probability exactly zero.
        """
        if played_mask.all(dim=-1).any():
            raise ContractError("policy called with every slot masked")
        onehot = F.one_hot(yhat, self.class_count).float()
        logits = self.policy(torch.cat([h, pooled_state, onehot], dim=-1))
        logits = logits.masked_fill(played_mask, float("-inf"))
        return F.softmax(logits, dim=-1)

    @staticmethod
    def select_argument(dist: torch.Tensor, mode: str,
                        rng: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Pick a slot from the policy distribution.

        ``train`` samples (recording the log-probability), ``eval`` takes
        the argmax with lowest-index tie-breaking. Returns (slots, logprobs),
        both shaped (B,).
        """
        if mode == "train":
            slots = torch.multinomial(dist, 1, generator=rng).squeeze(1)
        elif mode == "eval":
            slots = dist.argmax(dim=-1)
        else:
            raise ContractError(f"unknown selection mode {mode!r}")
        logprobs = torch.log(dist.gather(1, slots.unsqueeze(1)).squeeze(1))
        return slots, logprobs

    def baseline_value(self, h: torch.Tensor) -> torch.Tensor:
        """Scalar utility estimate per episode.

        The hidden state is detached, so baseline training never leaks
        gradient into the backbone or policy.
        """
        return self.baseline(h.detach()).squeeze(-1)

    def final_claim(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Claim logits and the argmax class from the final hidden state."""
        logits = self.claim(h)
        return logits, logits.argmax(dim=-1)


def build_players(slot_count: int, feature_dim: int, class_count: int,
                  hidden_size: int = DEFAULT_HIDDEN_SIZE,
                  seed: int = 0) -> tuple[Player, Player]:
    """Two independent players with seeded parameter initialization."""
    torch.manual_seed(seed)
    p1 = Player(slot_count, feature_dim, class_count, hidden_size)
    p2 = Player(slot_count, feature_dim, class_count, hidden_size)
    return p1, p2
