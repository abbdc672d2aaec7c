"""Rendering debates as figures: per-argument attention overlays.

Each argument's quantized vector, reshaped to the latent spatial grid, is
a low-resolution attention map. Overlays upscale it to the input size with
bilinear interpolation (half-pixel-center alignment, so each latent cell
lands on its receptive field), min-max normalize, and alpha-blend a heat
colormap over the input image. A debate figure shows the input followed by
one row of overlays per player.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib import colormaps
import torch
import torch.nn.functional as F

from vdk.codebook import Codebook
from vdk.debate import Argument, DebateTranscript
from vdk.errors import ContractError


@dataclass
class AttentionMap:
    """A low-resolution attention map drawn from one argument."""

    values: torch.Tensor  # (h, w)
    source_argument: Argument | None = None


def attention_map(arg: Argument, latent_shape: tuple[int, int],
                  cb: Codebook | None = None) -> AttentionMap:
    """Reshape an argument's feature vector to the latent grid (row-major).

    Transcripts loaded from disk carry no vectors; pass the codebook to
    reconstruct the vector from the argument's code index.
    """
    h, w = latent_shape
    vector = arg.vector
    if vector is None:
        if cb is None:
            raise ContractError("argument has no vector; pass the codebook")
        vector = cb.entries[arg.code_index].detach()
    if vector.numel() != h * w:
        raise ContractError(
            f"vector of size {vector.numel()} cannot fill a {h}x{w} grid")
    return AttentionMap(values=vector.reshape(h, w), source_argument=arg)


def _normalize(values: torch.Tensor) -> torch.Tensor:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return torch.zeros_like(values)
    return (values - lo) / (hi - lo)


def overlay(image: torch.Tensor, amap: AttentionMap, alpha: float = 0.5,
            cmap_name: str = "jet") -> torch.Tensor:
    """Blend an attention map over an image; returns an RGB (3,s,s) tensor.

    The map is bilinearly upscaled to the image size, min-max normalized
    (a constant map normalizes to zero: no heat), and used as a per-pixel
    blend weight scaled by ``alpha``; at ``alpha=0`` the input is returned
    exactly.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ContractError("alpha must lie in [0, 1]")
    if image.dim() != 3:
        raise ContractError(f"expected (c,s,s) image, got {tuple(image.shape)}")
    s = image.shape[-1]
    up = F.interpolate(amap.values[None, None].float(), size=(s, s),
                       mode="bilinear", align_corners=False)[0, 0]
    weight = _normalize(up)
    rgb = image if image.shape[0] == 3 else image.expand(3, -1, -1)
    heat = torch.from_numpy(
        colormaps[cmap_name](weight.numpy())[..., :3]).permute(2, 0, 1).float()
    w = (alpha * weight).unsqueeze(0)
    return rgb * (1.0 - w) + heat * w


def _panel_title(arg: Argument) -> str:
    sign = "+1" if arg.strength > 0 else "-1"
    return f"z{arg.code_index}  c={arg.claim}  s={sign}"


def render_debate(transcript: DebateTranscript, image: torch.Tensor,
                  out_path: str | Path, latent_shape: tuple[int, int],
                  cb: Codebook | None = None, alpha: float = 0.5) -> Path:
    """Compose the debate figure: input image, then one row of argument
    overlays per player, each panel titled with its codebook index, claim
    and strength sign. Writes a PNG and returns its path."""
    n = transcript.n
    if len(transcript.steps) != 2 * n:
        raise ContractError("transcript is incomplete")
    out_path = Path(out_path)
    fig, axes = plt.subplots(2, n + 1, figsize=(1.6 * (n + 1), 3.6))
    if n + 1 == 1:  # pragma: no cover - n >= 1 always gives >= 2 columns
        axes = axes.reshape(2, 1)
    for ax in axes.flat:
        ax.set_axis_off()
    img_show = image.permute(1, 2, 0).squeeze(-1).numpy()
    axes[0, 0].imshow(img_show, cmap="gray" if image.shape[0] == 1 else None,
                      vmin=0.0, vmax=1.0)
    axes[0, 0].set_title(f"input\nC(x)={transcript.classifier_pred}", fontsize=8)
    for arg in transcript.steps:
        row = arg.player - 1
        col = arg.step  # column 0 is the input panel
        amap = attention_map(arg, latent_shape, cb)
        panel = overlay(image, amap, alpha=alpha)
        axes[row, col].imshow(panel.permute(1, 2, 0).numpy())
        axes[row, col].set_title(_panel_title(arg), fontsize=8)
    axes[0, 1].set_ylabel("P1")
    axes[1, 1].set_ylabel("P2")
    fig.tight_layout()
    try:
        fig.savefig(out_path, dpi=100)
    except OSError as exc:
        raise OSError(f"failed to write figure to {out_path}: {exc}") from exc
    finally:
        plt.close(fig)
    return out_path
