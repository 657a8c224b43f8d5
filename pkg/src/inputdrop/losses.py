"""Dehazing generator objective: adversarial + weighted L1 + weighted perceptual."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DehazeLossWeights:
    lambda1: float = 10.0
    lambda2: float = 10.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = float(getattr(self, name))
            if not (v >= 0.0 and v < float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class PerceptualExtractorSpec:
    """Frozen random conv stack used as a stand-in for a pretrained network.

    ``taps`` selects which of the three stages contribute to the loss.
    """

    seed: int = 0
    width: int = 8
    taps: tuple[int, ...] = (0, 1, 2)
    in_channels: int = 3


def _same_shape(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def _finite(*xs: torch.Tensor):
    for x in xs:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input to loss")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return (pred - target).abs().mean()


def gan_losses(disc_real: torch.Tensor, disc_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN terms ``(generator, discriminator)``.

    Callers detach ``disc_fake`` themselves for the discriminator update.
    """
    _finite(disc_real, disc_fake)
    gen = ((disc_fake - 1.0) ** 2).mean()
    disc = 0.5 * (((disc_real - 1.0) ** 2).mean() + (disc_fake**2).mean())
    return gen, disc


def generator_adversarial_term(disc_fake: torch.Tensor) -> torch.Tensor:
    _finite(disc_fake)
    return ((disc_fake - 1.0) ** 2).mean()


class PerceptualExtractor(nn.Module):
    def __init__(self, spec: PerceptualExtractorSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        g = torch.Generator().manual_seed(spec.seed)
        self.stages = nn.ModuleList(
            [
                nn.Conv2d(spec.in_channels, w, 3, padding=1),
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
                nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            ]
        )
        with torch.no_grad():
            for conv in self.stages:
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, conv in enumerate(self.stages):
            x = F.relu(conv(x.to(conv.weight.dtype)))
            if i in self.spec.taps:
                feats.append(x)
        return feats

    def train(self, mode: bool = True):
        # frozen: always behaves as in eval
        return super().train(False)


@lru_cache(maxsize=8)
def _extractor(spec: PerceptualExtractorSpec, dtype: torch.dtype) -> PerceptualExtractor:
    return PerceptualExtractor(spec).to(dtype)


def perceptual_loss(
    pred: torch.Tensor, target: torch.Tensor, extractor: PerceptualExtractorSpec | PerceptualExtractor | None = None
) -> torch.Tensor:
    """Mean over taps of the mean squared feature difference."""
    _same_shape(pred, target)
    if extractor is None:
        extractor = PerceptualExtractorSpec()
    if isinstance(extractor, PerceptualExtractorSpec):
        extractor = _extractor(extractor, pred.dtype)
    fp, ft = extractor(pred), extractor(target)
    terms = [((a - b) ** 2).mean() for a, b in zip(fp, ft)]
    return torch.stack(terms).mean()


def dehaze_generator_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    disc_fake: torch.Tensor,
    weights: DehazeLossWeights = DehazeLossWeights(),
    extractor: PerceptualExtractorSpec | PerceptualExtractor | None = None,
    return_parts: bool = False,
):
    gan = generator_adversarial_term(disc_fake)
    l1 = l1_loss(pred, target)
    percep = perceptual_loss(pred, target, extractor)
    total = gan + weights.lambda1 * l1 + weights.lambda2 * percep
    if return_parts:
        return total, {"gan": gan, "l1": l1, "perceptual": percep}
    return total
