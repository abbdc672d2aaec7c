"""Two-player zero-sum debate over an image's quantized features.

Player 1 opens every step by arguing a latent slot, player 2 answers;
arguments are common knowledge. Each step's argument pair is scored by the
confidence gap it preserves on the quantized surrogate (the strength), and
after ``n`` steps each player's claim head reads its recurrent state. The
debate outcome is the surrogate's prediction from only the argued slots,
and the claim reward compares that outcome with both claims. Utilities are
zero-sum by construction: claim reward plus the sum of per-step strengths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch

from vdk.codebook import (
    QuantizedClassifier,
    QuantizedFeatureMap,
    _keep_to_mask,
    pool_batch,
    q_predict,
)
from vdk.errors import ConfigurationError, ContractError
from vdk.players import Player

MODES = ("committed", "non_committed")
MASK_MODES = ("remove_played", "keep_played")


@dataclass(frozen=True)
class DebateConfig:
    """Protocol parameters for one debate game."""

    n: int = 10
    tau: float = 0.5
    mode: str = "committed"
    allow_repeats: bool = False
    mask_mode: str = "remove_played"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("debate length n must be >= 1")
        if not (0.0 < self.tau < 1.0):
            raise ConfigurationError("tau must lie strictly between 0 and 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigurationError(
                f"unknown mask mode {self.mask_mode!r}; choose from {MASK_MODES}"
            )


@dataclass
class Argument:
    """One move: a latent slot, its induced claim and its +-1 strength."""

    player: int
    step: int
    slot: int
    code_index: int
    claim: int
    strength: int
    logprob: float
    baseline: float
    vector: torch.Tensor | None = None


@dataclass
class DebateTranscript:
    """Complete record of one debate episode."""

    image_id: str
    classifier_pred: int
    quantized_pred: int
    tau: float
    n: int
    mode: str
    steps: list[Argument] = field(default_factory=list)
    final_claims: tuple[int, int] = (0, 0)
    debate_outcome: int = 0
    claim_rewards: tuple[int, int] = (0, 0)
    utilities: tuple[int, int] = (0, 0)

    def to_json_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "classifier_pred": self.classifier_pred,
            "quantized_pred": self.quantized_pred,
            "tau": self.tau,
            "n": self.n,
            "mode": self.mode,
            "steps": [
                {
                    "player": a.player,
                    "k": a.step,
                    "slot": a.slot,
                    "code_index": a.code_index,
                    "claim": a.claim,
                    "strength": a.strength,
                    "logprob": a.logprob,
                    "baseline": a.baseline,
                }
                for a in self.steps
            ],
            "final_claims": list(self.final_claims),
            "Q": self.debate_outcome,
            "rewards": list(self.claim_rewards),
            "utilities": list(self.utilities),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DebateTranscript":
        t = cls(
            image_id=data["image_id"],
            classifier_pred=data["classifier_pred"],
            quantized_pred=data["quantized_pred"],
            tau=data["tau"],
            n=data["n"],
            mode=data["mode"],
            final_claims=tuple(data["final_claims"]),
            debate_outcome=data["Q"],
            claim_rewards=tuple(data["rewards"]),
            utilities=tuple(data["utilities"]),
        )
        t.steps = [
            Argument(
                player=s["player"], step=s["k"], slot=s["slot"],
                code_index=s["code_index"], claim=s["claim"],
                strength=s["strength"], logprob=s["logprob"],
                baseline=s["baseline"],
            )
            for s in data["steps"]
        ]
        return t


def save_transcripts(transcripts, path, config_hash: str | None = None) -> None:
    """Write transcripts as JSON lines, one debate object per line."""
    with open(path, "w") as fh:
        for t in transcripts:
            obj = t.to_json_dict()
            if config_hash is not None:
                obj["config_hash"] = config_hash
            fh.write(json.dumps(obj) + "\n")


def load_transcripts(path) -> list[DebateTranscript]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(DebateTranscript.from_json_dict(json.loads(line)))
    return out


def transcript_config_hashes(path) -> set[str]:
    hashes = set()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                hashes.add(json.loads(line).get("config_hash", ""))
    return hashes


def argument_claim(q: QuantizedClassifier, zmap: QuantizedFeatureMap, slot: int) -> int:
    """Class the surrogate predicts from this slot alone (all else masked)."""
    if not (0 <= slot < zmap.slot_count):
        raise ContractError(f"slot {slot} out of range")
    with torch.no_grad():
        probs = q_predict(q, zmap, keep=[slot])
    return int(probs.argmax())


def pair_strengths(q: QuantizedClassifier, zmap: QuantizedFeatureMap,
                   slot1: int, slot2: int, y: int, tau: float) -> tuple[int, int]:
    """Strengths for one step's argument pair.

    Delta is the class-y confidence gap between the full quantized map and
    the map with only this step's two slots kept. A small gap means the
    pair carries the decision: +1 for the supporting player, -1 for the
    opposing player, and vice versa above tau.
    """
    with torch.no_grad():
        full = q_predict(q, zmap, keep=None)
        pair = q_predict(q, zmap, keep={slot1, slot2})
        delta = float(torch.abs(full[y] - pair[y]))
    s1 = 1 if delta <= tau else -1
    return s1, -s1


def claim_reward(outcome: int, claim1: int, claim2: int) -> tuple[int, int]:
    """Terminal reward from comparing the debate outcome with both claims.

    +1 to the player whose claim alone matches the outcome, -1 to its
    opponent; 0 to both when the outcome matches neither or both claims.
    """
    if claim1 == claim2:
        return 0, 0
    if outcome == claim1:
        return 1, -1
    if outcome == claim2:
        return -1, 1
    return 0, 0


def noncommitted_reward(outcome: int, classifier_pred: int) -> tuple[int, int]:
    """Non-committed variant: player 1 wins iff the debate outcome matches
    the classifier's decision; claims stay out of the reward."""
    r1 = 1 if outcome == classifier_pred else -1
    return r1, -r1


def utility(transcript: DebateTranscript) -> tuple[int, int]:
    """Claim reward plus summed strengths per player; zero-sum."""
    if len(transcript.steps) != 2 * transcript.n:
        raise ContractError(
            f"incomplete transcript: {len(transcript.steps)} arguments for n={transcript.n}"
        )
    s1 = sum(a.strength for a in transcript.steps if a.player == 1)
    s2 = sum(a.strength for a in transcript.steps if a.player == 2)
    u1 = transcript.claim_rewards[0] + s1
    u2 = transcript.claim_rewards[1] + s2
    return u1, u2


def masked_state(zmap: QuantizedFeatureMap, played_slots) -> torch.Tensor:
    """Copy of the slot vectors with the played slots zeroed."""
    mask = _keep_to_mask(played_slots, zmap.slot_count, device=zmap.vectors.device)
    out = zmap.vectors.clone()
    out[mask] = 0.0
    return out


@dataclass
class DebateRollout:
    """Batched debate record; tensors carry autograd graph in train mode.

    Shapes use B episodes, n steps, player axis ordered (P1, P2).
    """

    slots: torch.Tensor             # (B, n, 2) long
    code_indices: torch.Tensor      # (B, n, 2) long
    arg_claims: torch.Tensor        # (B, n, 2) long
    strengths: torch.Tensor         # (B, n, 2) int
    logprobs: torch.Tensor          # (B, n, 2)
    baselines: torch.Tensor         # (B, n, 2)
    entropies: torch.Tensor         # (B, n, 2)
    expected_vectors: torch.Tensor  # (B, n, 2, d)
    selected_vectors: torch.Tensor  # (B, n, 2, d), detached
    policy_dists: torch.Tensor      # (B, n, 2, ch), detached
    claim_logits: torch.Tensor      # (B, 2, N)
    final_claims: torch.Tensor      # (B, 2) long
    outcome: torch.Tensor           # (B,) long
    rewards: torch.Tensor           # (B, 2)
    utilities: torch.Tensor         # (B, 2)
    classifier_pred: torch.Tensor   # (B,) long
    quantized_pred: torch.Tensor    # (B,) long

    @property
    def batch(self) -> int:
        return int(self.slots.shape[0])


def _entropy(dist: torch.Tensor) -> torch.Tensor:
    """Shannon entropy per row with the 0 log 0 = 0 convention."""
    logp = torch.where(dist > 0, torch.log(dist.clamp_min(1e-30)),
                       torch.zeros_like(dist))
    return -(dist * logp).sum(dim=-1)


def rollout_debates(
    p1: Player,
    p2: Player,
    q: QuantizedClassifier,
    vectors: torch.Tensor,
    indices: torch.Tensor,
    classifier_pred: torch.Tensor,
    config: DebateConfig,
    rng: torch.Generator,
    select_mode: str = "eval",
) -> DebateRollout:
    """Run a batch of debates over quantized maps.

    Args:
        vectors: (B, ch, d) quantized slot vectors (frozen codebook rows).
        indices: (B, ch) codebook indices per slot.
        classifier_pred: (B,) the continuous classifier's decisions.
        select_mode: ``train`` samples slots from the policies (with graph),
            ``eval`` takes argmaxes under no_grad.
    """
    b, ch, d = vectors.shape
    if not config.allow_repeats and 2 * config.n > ch:
        raise ConfigurationError(
            f"debate of n={config.n} needs {2 * config.n} distinct slots "
            f"but the map has only {ch}"
        )
    grad_ctx = torch.enable_grad() if select_mode == "train" else torch.no_grad()
    with grad_ctx:
        return _rollout_inner(p1, p2, q, vectors, indices, classifier_pred,
                              config, rng, select_mode)


def _rollout_inner(p1, p2, q, vectors, indices, classifier_pred, config, rng,
                   select_mode):
    b, ch, d = vectors.shape
    n = config.n
    arange_b = torch.arange(b)

    with torch.no_grad():
        full_probs = q.probs(vectors.mean(dim=1))
        quantized_pred = full_probs.argmax(dim=-1)
        full_conf_y = full_probs[arange_b, classifier_pred]

    played = torch.zeros(b, ch, dtype=torch.bool)
    h1 = p1.initial_hidden(b, rng)
    h2 = p2.initial_hidden(b, rng)
    # P1 opens from a uniformly sampled feature of the input.
    seed_slot = torch.randint(0, ch, (b,), generator=rng)
    prev1 = vectors[arange_b, seed_slot]
    prev2 = None

    per_step = {key: [] for key in ("slots", "logprobs", "baselines", "entropies",
                                    "expected", "selected", "dists", "strengths",
                                    "claims")}

    def pooled_state():
        if config.mask_mode == "remove_played":
            return pool_batch(vectors, ~played)
        return vectors.mean(dim=1)

    def policy_mask():
        if config.allow_repeats:
            return torch.zeros_like(played)
        # Clone: the policy's masked_fill saves this tensor for backward and
        # `played` is mutated in place right after the call.
        return played.clone()

    last1 = last2 = None
    for k in range(1, n + 1):
        # Player 1 moves first, seeing arguments through step k-1.
        e1 = p1.modulate(prev1, prev2, batch=b)
        h1 = p1.step_backbone(h1, e1)
        dist1 = p1.policy_distribution(h1, pooled_state(), quantized_pred, policy_mask())
        a1, logp1 = Player.select_argument(dist1, select_mode, rng)
        vec1 = vectors[arange_b, a1]
        played[arange_b, a1] = True

        # Player 2 answers, additionally seeing player 1's step-k argument.
        e2 = p2.modulate(prev2, vec1, batch=b)
        h2 = p2.step_backbone(h2, e2)
        dist2 = p2.policy_distribution(h2, pooled_state(), quantized_pred, policy_mask())
        a2, logp2 = Player.select_argument(dist2, select_mode, rng)
        vec2 = vectors[arange_b, a2]
        played[arange_b, a2] = True

        with torch.no_grad():
            pair_mask = torch.zeros(b, ch, dtype=torch.bool)
            pair_mask[arange_b, a1] = True
            pair_mask[arange_b, a2] = True
            pair_probs = q.probs(pool_batch(vectors, pair_mask))
            delta = (full_conf_y - pair_probs[arange_b, classifier_pred]).abs()
            s1 = torch.where(delta <= config.tau, 1, -1)
            claim1 = q.probs(vec1 / ch).argmax(dim=-1)
            claim2 = q.probs(vec2 / ch).argmax(dim=-1)

        per_step["slots"].append(torch.stack([a1, a2], dim=-1))
        per_step["logprobs"].append(torch.stack([logp1, logp2], dim=-1))
        per_step["baselines"].append(
            torch.stack([p1.baseline_value(h1), p2.baseline_value(h2)], dim=-1))
        per_step["entropies"].append(
            torch.stack([_entropy(dist1), _entropy(dist2)], dim=-1))
        per_step["expected"].append(torch.stack(
            [torch.bmm(dist1.unsqueeze(1), vectors).squeeze(1),
             torch.bmm(dist2.unsqueeze(1), vectors).squeeze(1)], dim=1))
        per_step["selected"].append(torch.stack([vec1, vec2], dim=1).detach())
        per_step["dists"].append(torch.stack([dist1, dist2], dim=1).detach())
        per_step["strengths"].append(torch.stack([s1, -s1], dim=-1))
        per_step["claims"].append(torch.stack([claim1, claim2], dim=-1))

        prev1, prev2 = vec1, vec2
        last1, last2 = vec1, vec2

    # Final hidden updates feed each player the arguments it has not yet
    # ingested, so claims aggregate all 2n arguments.
    h1 = p1.step_backbone(h1, p1.modulate(last1, last2, batch=b))
    h2 = p2.step_backbone(h2, p2.modulate(last2, None, batch=b))
    claim_logits1, final1 = p1.final_claim(h1)
    claim_logits2, final2 = p2.final_claim(h2)

    with torch.no_grad():
        outcome = q.probs(pool_batch(vectors, played)).argmax(dim=-1)

    strengths = torch.stack(per_step["strengths"], dim=1)  # (B, n, 2)
    if config.mode == "committed":
        agree = final1 == final2
        r1 = torch.where(outcome == final1, 1, 0) + torch.where(outcome == final2, -1, 0)
        r1 = torch.where(agree, torch.zeros_like(r1), r1)
    else:
        r1 = torch.where(outcome == classifier_pred, 1, -1)
    rewards = torch.stack([r1, -r1], dim=-1)
    utilities = rewards + strengths.sum(dim=1)

    slots = torch.stack(per_step["slots"], dim=1)
    return DebateRollout(
        slots=slots,
        code_indices=indices.gather(1, slots.reshape(slots.shape[0], -1)).reshape(slots.shape),
        arg_claims=torch.stack(per_step["claims"], dim=1),
        strengths=strengths,
        logprobs=torch.stack(per_step["logprobs"], dim=1),
        baselines=torch.stack(per_step["baselines"], dim=1),
        entropies=torch.stack(per_step["entropies"], dim=1),
        expected_vectors=torch.stack(per_step["expected"], dim=1),
        selected_vectors=torch.stack(per_step["selected"], dim=1),
        policy_dists=torch.stack(per_step["dists"], dim=1),
        claim_logits=torch.stack([claim_logits1, claim_logits2], dim=1),
        final_claims=torch.stack([final1, final2], dim=-1),
        outcome=outcome,
        rewards=rewards,
        utilities=utilities,
        classifier_pred=classifier_pred,
        quantized_pred=quantized_pred,
    )


def rollout_to_transcripts(rollout: DebateRollout, config: DebateConfig,
                           image_ids: list[str]) -> list[DebateTranscript]:
    """Unpack a batched rollout into per-episode transcripts (move order)."""
    out = []
    for i in range(rollout.batch):
        t = DebateTranscript(
            image_id=image_ids[i],
            classifier_pred=int(rollout.classifier_pred[i]),
            quantized_pred=int(rollout.quantized_pred[i]),
            tau=config.tau,
            n=config.n,
            mode=config.mode,
            final_claims=(int(rollout.final_claims[i, 0]), int(rollout.final_claims[i, 1])),
            debate_outcome=int(rollout.outcome[i]),
            claim_rewards=(int(rollout.rewards[i, 0]), int(rollout.rewards[i, 1])),
            utilities=(int(rollout.utilities[i, 0]), int(rollout.utilities[i, 1])),
        )
        for k in range(config.n):
            for p in (0, 1):
                t.steps.append(Argument(
                    player=p + 1,
                    step=k + 1,
                    slot=int(rollout.slots[i, k, p]),
                    code_index=int(rollout.code_indices[i, k, p]),
                    claim=int(rollout.arg_claims[i, k, p]),
                    strength=int(rollout.strengths[i, k, p]),
                    logprob=float(rollout.logprobs[i, k, p]),
                    baseline=float(rollout.baselines[i, k, p]),
                    vector=rollout.selected_vectors[i, k, p],
                ))
        out.append(t)
    return out


def run_debate(
    p1: Player,
    p2: Player,
    zmap: QuantizedFeatureMap,
    q: QuantizedClassifier,
    config: DebateConfig,
    rng: torch.Generator,
    classifier_pred: int,
    mode: str = "eval",
) -> DebateTranscript:
    """Run one debate episode over a quantized feature map.

    ``mode='eval'`` selects slots greedily (deterministic for a fixed rng
    seed); ``mode='train'`` samples from the policies.
    """
    if p1.slot_count != zmap.slot_count or p2.slot_count != zmap.slot_count:
        raise ContractError("players were built for a different slot count")
    rollout = rollout_debates(
        p1, p2, q,
        zmap.vectors.unsqueeze(0),
        zmap.indices.unsqueeze(0),
        torch.tensor([classifier_pred]),
        config, rng, select_mode=mode,
    )
    return rollout_to_transcripts(rollout, config, [zmap.source_id])[0]
