"""Continuous image classifiers exposed as feature extractor + feature head.

Every supported architecture is decomposed as ``predict(x) = head(features(x))``
where ``features`` returns the last spatial feature map (before global
pooling) and ``head`` applies global average pooling plus a linear softmax
classifier. The quantization stage consumes ``features`` output channel by
channel, so the split point matters more than the backbone choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from vdk.datasets import DatasetSplit
from vdk.errors import ConfigurationError, ContractError, TrainingDivergedError

ARCHS = ("vanilla", "resnet18", "densenet121")


@dataclass(frozen=True)
class TrainHParams:
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 50
    batch_size: int = 64


@dataclass(frozen=True)
class ClassifierSpec:
    arch: str
    class_count: int
    input_shape: tuple[int, int, int]  # (c, s, s)
    train_hparams: TrainHParams = field(default_factory=TrainHParams)
    conv_depth: int = 7  # vanilla only; 5 or 7

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; choose from {ARCHS}")
        if self.class_count < 2:
            raise ConfigurationError("class_count must be >= 2")
        if self.conv_depth not in (5, 7):
            raise ConfigurationError("conv_depth must be 5 or 7")
        if self.train_hparams.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.train_hparams.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")


def default_hparams(arch: str) -> TrainHParams:
    """Published training recipes: shallow net vs the deeper backbones."""
    if arch == "vanilla":
        return TrainHParams(lr=1e-3, weight_decay=1e-3, epochs=50, batch_size=64)
    return TrainHParams(lr=1e-3, weight_decay=5e-3, epochs=64, batch_size=64)


# Conv widths per layer; the last entry fixes the number of latent channels
# (= debate slots).
_VANILLA_WIDTHS = {
    7: (32, 32, 64, 64, 128, 128, 64),
    5: (32, 64, 64, 128, 64),
}
_POOL_AFTER = (1, 3, 5)  # 1-indexed conv layers followed by 2x max-pool


class VanillaNet(nn.Module):
    """Stack of 3x3 conv + batch-norm + ReLU layers with three 2x max-pools,
    global average pooling and a linear class head."""

    def __init__(self, in_channels: int, class_count: int, depth: int = 7):
        super().__init__()
        widths = _VANILLA_WIDTHS[depth]
        layers = []
        prev = in_channels
        for i, width in enumerate(widths, start=1):
            layers += [
                nn.Conv2d(prev, width, kernel_size=3, padding=1),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            if i in _POOL_AFTER:
                layers.append(nn.MaxPool2d(2))
            prev = width
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(prev, class_count)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)

    def head_logits(self, fmap: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(fmap, 1).flatten(1)
        return self.fc(pooled)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head_logits(self.features(x))


class _TorchvisionBackbone(nn.Module):
    """resnet18/densenet121 with the stem adapted to the input channels and,
    for 32x32 inputs, a stride-1 3x3 stem (no initial pool) so the final
    feature grid stays 4x4 instead of collapsing to 1x1."""

    def __init__(self, arch: str, in_channels: int, class_count: int, small_input: bool):
        super().__init__()
        import torchvision.models as tvm

        if arch == "resnet18":
            net = tvm.resnet18(weights=None, num_classes=class_count)
            if small_input:
                net.conv1 = nn.Conv2d(in_channels, 64, 3, stride=1, padding=1, bias=False)
                net.maxpool = nn.Identity()
            elif in_channels != 3:
                net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
            self._features = nn.Sequential(
                net.conv1, net.bn1, net.relu, net.maxpool,
                net.layer1, net.layer2, net.layer3, net.layer4,
            )
            self.fc = net.fc
        else:  # densenet121
            net = tvm.densenet121(weights=None, num_classes=class_count)
            first = net.features.conv0
            if small_input:
                net.features.conv0 = nn.Conv2d(in_channels, first.out_channels, 3,
                                               stride=1, padding=1, bias=False)
                net.features.pool0 = nn.Identity()
            elif in_channels != 3:
                net.features.conv0 = nn.Conv2d(in_channels, first.out_channels, 7,
                                               stride=2, padding=3, bias=False)
            self._features = nn.Sequential(net.features, nn.ReLU(inplace=True))
            self.fc = net.classifier

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self._features(x)

    def head_logits(self, fmap: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(fmap, 1).flatten(1)
        return self.fc(pooled)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head_logits(self.features(x))


@dataclass
class TrainedClassifier:
    """A (possibly still untrained) classifier with its f/g decomposition."""

    net: nn.Module
    spec: ClassifierSpec
    test_accuracy: float = 0.0

    def f(self, x: torch.Tensor) -> torch.Tensor:
        """Feature extractor: (B,c,s,s) -> (B,ch,h,w) continuous feature maps."""
        self._check_shape(x)
        return self.net.features(x)

    def g(self, fmap: torch.Tensor) -> torch.Tensor:
        """Feature classifier: feature maps -> class probabilities."""
        return F.softmax(self.net.head_logits(fmap), dim=-1)

    def feature_shape(self) -> tuple[int, int, int]:
        """(ch, h, w) of the feature extractor output for this spec's input."""
        self.net.eval()
        with torch.no_grad():
            c, s1, s2 = self.spec.input_shape
            fmap = self.net.features(torch.zeros(1, c, s1, s2))
        return tuple(fmap.shape[1:])

    def predict_batch(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self.net.eval()
        with torch.no_grad():
            probs = self.g(self.f(x))
        return probs.argmax(dim=-1), probs

    def _check_shape(self, x: torch.Tensor) -> None:
        if tuple(x.shape[-3:]) != self.spec.input_shape:
            raise ContractError(
                f"input shape {tuple(x.shape[-3:])} does not match "
                f"spec {self.spec.input_shape}"
            )


def build_classifier(spec: ClassifierSpec) -> TrainedClassifier:
    """Construct the (untrained) network described by ``spec``."""
    c = spec.input_shape[0]
    if spec.arch == "vanilla":
        net = VanillaNet(c, spec.class_count, depth=spec.conv_depth)
    else:
        small = spec.input_shape[1] < 64
        net = _TorchvisionBackbone(spec.arch, c, spec.class_count, small_input=small)
    return TrainedClassifier(net=net, spec=spec)


def predict(classifier: TrainedClassifier, image: torch.Tensor) -> tuple[int, torch.Tensor]:
    """Predict a single image; returns (class index, probability vector)."""
    if image.dim() != 3:
        raise ContractError(f"expected a (c,s,s) image, got shape {tuple(image.shape)}")
    pred, probs = classifier.predict_batch(image.unsqueeze(0))
    return int(pred[0]), probs[0]


def _iterate_batches(x, y, batch_size, generator=None):
    n = x.shape[0]
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def evaluate_accuracy(classifier: TrainedClassifier, split: DatasetSplit,
                      batch_size: int = 256) -> float:
    x, y = split.stack()
    correct = 0
    classifier.net.eval()
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = x[start:start + batch_size]
            pred, _ = classifier.predict_batch(xb)
            correct += int((pred == y[start:start + batch_size]).sum())
    return correct / max(1, x.shape[0])


def train_classifier(
    model: TrainedClassifier,
    train_split: DatasetSplit,
    val_split: DatasetSplit | None,
    spec: ClassifierSpec,
    seed: int = 0,
    log_fn=None,
) -> TrainedClassifier:
    """Cross-entropy training with Adam per the spec'd recipe.

    Records accuracy on ``val_split`` (when given) into ``test_accuracy``;
    the pipeline overwrites that field with held-out test accuracy after
    training. Raises :class:`TrainingDivergedError` on a non-finite loss.
    """
    if train_split.class_count != spec.class_count:
        raise ContractError("train split class_count does not match spec")
    if val_split is not None and val_split.class_count != spec.class_count:
        raise ContractError("val split class_count does not match spec")
    hp = spec.train_hparams
    x, y = train_split.stack()
    opt = torch.optim.Adam(model.net.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    model.net.train()
    for epoch in range(hp.epochs):
        total, count = 0.0, 0
        model.net.train()
        for xb, yb in _iterate_batches(x, y, hp.batch_size, gen):
            opt.zero_grad()
            loss = F.cross_entropy(model.net(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"classifier loss became non-finite at epoch {epoch}", epoch=epoch
                )
            loss.backward()
            opt.step()
            total += loss.item() * xb.shape[0]
            count += xb.shape[0]
        if log_fn is not None:
            val_acc = evaluate_accuracy(model, val_split) if val_split else float("nan")
            log_fn(epoch, total / max(1, count), val_acc)
    model.net.eval()
    if val_split is not None:
        model.test_accuracy = evaluate_accuracy(model, val_split)
    return model
