"""Discrete codebook distilled from a classifier's latent space.

Each channel of the feature extractor's output — an h x w spatial map,
flattened to a d-vector — is snapped to its nearest codebook entry, so an
input image becomes a tuple of ``ch`` discrete features. A small surrogate
head (the quantized classifier ``q``) maps the average-pooled discrete
features to class probabilities and is trained to agree with the frozen
classifier by knowledge distillation. Masking subsets of slots before
pooling (the ``do`` intervention) is the primitive every debate quantity
is built from.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from vdk.classifier import TrainedClassifier
from vdk.errors import ConfigurationError, ContractError, TrainingDivergedError

METRICS = ("euclidean", "cosine")


class Codebook(nn.Module):
    """A learnable set of ``n_entries`` feature vectors in R^dim."""

    def __init__(self, n_entries: int, dim: int, metric: str = "euclidean"):
        super().__init__()
        if n_entries < 2:
            raise ConfigurationError("codebook needs at least 2 entries")
        if dim < 1:
            raise ConfigurationError("codebook dim must be >= 1")
        if metric not in METRICS:
            raise ConfigurationError(f"unknown metric {metric!r}; choose from {METRICS}")
        self.n_entries = n_entries
        self.dim = dim
        self.metric = metric
        self.entries = nn.Parameter(torch.zeros(n_entries, dim))

    def distances(self, flat: torch.Tensor) -> torch.Tensor:
        """Distance from each row of ``flat`` (R, d) to every entry -> (R, n).

        Euclidean uses the squared L2 norm, cosine the negative inner
        product. Computed rowwise against the full entry table so argmin
        tie-breaking is simply the lowest entry index.
        """
        if flat.shape[-1] != self.dim:
            raise ContractError(
                f"feature dim {flat.shape[-1]} does not match codebook dim {self.dim}"
            )
        if self.metric == "cosine":
            return -(flat @ self.entries.t())
        # Chunk rows to bound the (rows, n_entries, dim) intermediate.
        chunk = max(1, (1 << 22) // (self.n_entries * self.dim))
        out = []
        for start in range(0, flat.shape[0], chunk):
            block = flat[start:start + chunk]
            diff = block.unsqueeze(1) - self.entries.unsqueeze(0)
            out.append(diff.pow(2).sum(-1))
        return torch.cat(out, dim=0)


def init_codebook(n_entries: int, dim: int, metric: str = "euclidean",
                  seed: int = 0) -> Codebook:
    """Create a codebook with entries i.i.d. uniform in the open interval
    (-1/n_entries, 1/n_entries); deterministic for a fixed seed."""
    cb = Codebook(n_entries, dim, metric)
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / n_entries
    values = (torch.rand(n_entries, dim, generator=gen) * 2.0 - 1.0) * bound
    values[values == -bound] = 0.0  # keep the interval open at the low end
    with torch.no_grad():
        cb.entries.copy_(values)
    return cb


@dataclass
class QuantizedFeatureMap:
    """Per-channel codebook assignment for one input image."""

    indices: torch.Tensor  # (ch,) long
    vectors: torch.Tensor  # (ch, d); row i is the codebook entry at indices[i]
    source_id: str = ""

    @property
    def slot_count(self) -> int:
        return int(self.indices.shape[0])


def quantize_batch(fmaps: torch.Tensor, cb: Codebook,
                   straight_through: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Quantize a batch of feature maps (B, ch, h, w) or (B, ch, d).

    Returns (vectors (B, ch, d), indices (B, ch)). With ``straight_through``
    the returned vectors carry the continuous features' gradient (quantized
    values forward, identity gradient backward).
    """
    if fmaps.dim() == 4:
        flat = fmaps.flatten(2)
    elif fmaps.dim() == 3:
        flat = fmaps
    else:
        raise ContractError(f"expected (B,ch,h,w) or (B,ch,d), got {tuple(fmaps.shape)}")
    b, ch, d = flat.shape
    dist = cb.distances(flat.reshape(b * ch, d))
    indices = dist.argmin(dim=1).reshape(b, ch)
    vectors = cb.entries[indices.reshape(-1)].reshape(b, ch, d)
    if straight_through:
        vectors = flat + (vectors - flat).detach()
    return vectors, indices


def quantize(fmap: torch.Tensor, cb: Codebook, source_id: str = "") -> QuantizedFeatureMap:
    """Quantize one continuous feature map (ch, h, w) channel by channel."""
    if fmap.dim() != 3 and fmap.dim() != 2:
        raise ContractError(f"expected (ch,h,w) or (ch,d), got {tuple(fmap.shape)}")
    with torch.no_grad():
        vectors, indices = quantize_batch(fmap.unsqueeze(0), cb)
    return QuantizedFeatureMap(indices=indices[0], vectors=vectors[0], source_id=source_id)


def _keep_to_mask(keep, slot_count: int, device=None) -> torch.Tensor:
    """Normalize a keep-set (None, bool mask, or index iterable) to a bool mask."""
    if keep is None:
        return torch.ones(slot_count, dtype=torch.bool, device=device)
    if isinstance(keep, torch.Tensor) and keep.dtype == torch.bool:
        if keep.shape[-1] != slot_count:
            raise ContractError("keep mask length does not match slot count")
        return keep
    idx = torch.as_tensor(list(keep), dtype=torch.long, device=device)
    if idx.numel() > 0 and (idx.min() < 0 or idx.max() >= slot_count):
        raise ContractError("keep indices out of range")
    mask = torch.zeros(slot_count, dtype=torch.bool, device=device)
    mask[idx] = True
    return mask


def pool(zmap: QuantizedFeatureMap | torch.Tensor, keep=None) -> torch.Tensor:
    """Average-pool slot vectors with masked slots contributing zero.

    The mean is taken over all ``ch`` slots regardless of how many are
    kept, so masking shrinks the pooled vector instead of renormalizing —
    the class-confidence gap used for argument strengths depends on that.
    Slots outside ``keep`` cannot influence the result (they are never
    read).
    """
    vectors = zmap.vectors if isinstance(zmap, QuantizedFeatureMap) else zmap
    ch = vectors.shape[0]
    mask = _keep_to_mask(keep, ch, device=vectors.device)
    kept = vectors[mask]
    if kept.shape[0] == 0:
        return torch.zeros(vectors.shape[1], dtype=vectors.dtype, device=vectors.device)
    return kept.sum(dim=0) / ch


def pool_batch(vectors: torch.Tensor, keep_mask: torch.Tensor) -> torch.Tensor:
    """Batched pooling: (B, ch, d) vectors with a (B, ch) bool keep mask."""
    ch = vectors.shape[1]
    return (vectors * keep_mask.unsqueeze(-1)).sum(dim=1) / ch


class QuantizedClassifier(nn.Module):
    """Linear head over the pooled discrete features, softmax-normalized."""

    def __init__(self, dim: int, class_count: int):
        super().__init__()
        self.class_count = class_count
        self.head = nn.Linear(dim, class_count)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.head(pooled)

    def probs(self, pooled: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.head(pooled), dim=-1)


def q_predict(q: QuantizedClassifier, zmap: QuantizedFeatureMap, keep=None) -> torch.Tensor:
    """Class distribution from the quantized features with only ``keep``
    slots unmasked; ``keep=None`` means the full, unmasked map."""
    return q.probs(pool(zmap, keep))


def hessian_penalty(fn, x: torch.Tensor, probes: int = 2, seed: int = 0,
                    eps: float = 0.1) -> torch.Tensor:
    """Stochastic estimate of the off-diagonal Hessian magnitude of ``fn``.

    Perturbs ``x`` along Rademacher directions of magnitude ``eps`` and
    measures second-order central differences of ``fn``; their variance
    across probes isolates mixed partial derivatives (a linear or additively
    separable ``fn`` scores ~0). With a single probe the centered variance
    is undefined, so the squared second difference is used instead, which
    is exact for trace-free Hessians and still zero for linear maps.

    Deterministic for a fixed seed; always >= 0.
    """
    if probes < 1:
        raise ConfigurationError("probes must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    center = fn(x)
    second = []
    for _ in range(probes):
        v = torch.randint(0, 2, x.shape, generator=gen, dtype=x.dtype) * 2.0 - 1.0
        v = v * eps
        second.append((fn(x + v) - 2.0 * center + fn(x - v)) / eps ** 2)
    stacked = torch.stack(second)
    if probes == 1:
        per_output = stacked[0] ** 2
    else:
        per_output = stacked.var(dim=0, unbiased=True)
    return per_output.mean()


@dataclass(frozen=True)
class DistillHParams:
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 64
    commitment: float = 0.25
    hessian_beta: float = 0.0
    hessian_probes: int = 2
    hessian_eps: float = 0.1
    hessian_subbatch: int = 4
    seed: int = 0


def distill_agreement(classifier: TrainedClassifier, q: QuantizedClassifier,
                      cb: Codebook, split, batch_size: int = 256) -> float:
    """Fraction of images where q's prediction matches the classifier's."""
    x, _ = split.stack()
    agree = 0
    classifier.net.eval()
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = x[start:start + batch_size]
            fmap = classifier.f(xb)
            target = classifier.g(fmap).argmax(dim=-1)
            vectors, _ = quantize_batch(fmap, cb)
            pred = q.probs(vectors.mean(dim=1)).argmax(dim=-1)
            agree += int((pred == target).sum())
    return agree / max(1, x.shape[0])


def distill(
    classifier: TrainedClassifier,
    q: QuantizedClassifier,
    cb: Codebook,
    train_split,
    hparams: DistillHParams = DistillHParams(),
    log_fn=None,
) -> tuple[QuantizedClassifier, Codebook]:
    """Train q and the codebook to mimic the frozen classifier.

    Loss per batch: cross-entropy between q's prediction on the pooled
    quantized features and the classifier's own decision, plus the
    quantization term (codebook entries pulled toward the continuous
    features, commitment-weighted reverse pull) and, when
    ``hessian_beta > 0``, the Hessian penalty of the quantized channel
    outputs with respect to input perturbations, estimated on a small
    sub-batch of raw images.

    The classifier is frozen throughout: its parameters receive no
    gradient and are not touched by the optimizer.
    """
    classifier.net.eval()
    for p in classifier.net.parameters():
        p.requires_grad_(False)

    x, _ = train_split.stack()
    with torch.no_grad():
        fmaps, targets = [], []
        for start in range(0, x.shape[0], 256):
            fmap = classifier.f(x[start:start + 256])
            fmaps.append(fmap.flatten(2))
            targets.append(classifier.g(fmap).argmax(dim=-1))
        fmaps = torch.cat(fmaps)
        targets = torch.cat(targets)

    params = list(q.parameters()) + list(cb.parameters())
    opt = torch.optim.Adam(params, lr=hparams.lr)
    gen = torch.Generator().manual_seed(hparams.seed)

    def quantized_channels(images: torch.Tensor) -> torch.Tensor:
        vectors, _ = quantize_batch(classifier.f(images), cb)
        return vectors.flatten(1)

    for epoch in range(hparams.epochs):
        order = torch.randperm(fmaps.shape[0], generator=gen)
        total, count = 0.0, 0
        for start in range(0, fmaps.shape[0], hparams.batch_size):
            idx = order[start:start + hparams.batch_size]
            flat = fmaps[idx]
            vectors, _ = quantize_batch(flat, cb)
            # Straight-through for the task loss: the head sees quantized
            # values but entries learn only from the quantization pull,
            # which keeps the codebook from collapsing onto a few winners.
            vectors_st = flat + (vectors - flat).detach()
            ce = F.cross_entropy(q(vectors_st.mean(dim=1)), targets[idx])
            l_quant = F.mse_loss(vectors, flat.detach()) \
                + hparams.commitment * F.mse_loss(vectors.detach(), flat)
            loss = ce + l_quant
            if hparams.hessian_beta > 0.0:
                sub = idx[: hparams.hessian_subbatch]
                loss = loss + hparams.hessian_beta * hessian_penalty(
                    quantized_channels, x[sub],
                    probes=hparams.hessian_probes,
                    seed=hparams.seed * 100003 + epoch * 1009 + start,
                    eps=hparams.hessian_eps,
                )
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"distillation loss became non-finite at epoch {epoch}", epoch=epoch
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * idx.numel()
            count += idx.numel()
        if log_fn is not None:
            log_fn(epoch, total / max(1, count))
    return q, cb
