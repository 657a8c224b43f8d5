"""Desk-scale backbones and first-convolution channel inflation."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1


class BackboneKind(str, Enum):
    SMALL_RESNET_CLASSIFIER = "small_resnet_classifier"
    RESNET_GENERATOR = "resnet_generator"
    PATCH_DISCRIMINATOR = "patch_discriminator"
    MODDROP_BRANCH_NET = "moddrop_branch_net"


@dataclass(frozen=True)
class BackboneSpec:
    kind: BackboneKind
    input_channels: int
    width: int = 16
    depth: int = 4
    num_outputs: int = 10
    stem_stride: int = 2
    # moddrop only: channel split between the two branches, canonical first
    branch_channels: tuple[int, int] = (3, 1)
    p_branch: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", BackboneKind(self.kind))
        object.__setattr__(self, "branch_channels", tuple(self.branch_channels))
        for name in ("input_channels", "width", "depth", "num_outputs", "stem_stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kind is BackboneKind.MODDROP_BRANCH_NET:
            if len(self.branch_channels) != 2 or sum(self.branch_channels) != self.input_channels:
                raise ValueError("moddrop net needs exactly two branches covering all input channels")
        if not 0.0 <= self.p_branch <= 1.0:
            raise ValueError("p_branch must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["branch_channels"] = list(self.branch_channels)
        return d


# ---------------------------------------------------------------------------
# kernel banks


@dataclass(frozen=True)
class ConvKernelBank:
    weight: torch.Tensor
    bias: torch.Tensor | None = None

    def __post_init__(self):
        if self.weight.dim() != 4 or self.weight.shape[1] < 1:
            raise ValueError(f"expected out x in x k x k weights, got {tuple(self.weight.shape)}")
        if not torch.isfinite(self.weight).all():
            raise ValueError("kernel weights must be finite")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def from_conv(cls, conv: nn.Conv2d) -> "ConvKernelBank":
        bias = None if conv.bias is None else conv.bias.detach().clone()
        return cls(conv.weight.detach().clone(), bias)


def expand_input_channels(
    bank: ConvKernelBank, extra: int, init: str = "random", seed: int | None = 0
) -> ConvKernelBank:
    """Append ``extra`` input-channel slices to a kernel bank.

    Existing slices are copied bit for bit. ``init="random"`` draws the new
    slices from U(-b, b) with b = 1/sqrt(fan_in) of the original layer,
    matching the default conv initialisation; ``init="zeros"`` leaves the
    network's response to the original channels unchanged.
    """
    if extra <= 0:
        raise ValueError(f"extra must be a positive integer, got {extra}")
    w = bank.weight
    out_c, in_c, kh, kw = w.shape
    shape = (out_c, extra, kh, kw)
    if init == "zeros":
        new = torch.zeros(shape, dtype=w.dtype)
    elif init == "random":
        g = torch.Generator().manual_seed(int(seed or 0))
        bound = 1.0 / math.sqrt(in_c * kh * kw)
        new = (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1).mul(bound).to(w.dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    weight = torch.cat([w.detach().clone(), new], dim=1)
    bias = None if bank.bias is None else bank.bias.detach().clone()
    return ConvKernelBank(weight, bias)


def _conv_from_bank(old: nn.Conv2d, bank: ConvKernelBank) -> nn.Conv2d:
    conv = nn.Conv2d(
        bank.in_channels,
        old.out_channels,
        old.kernel_size,
        stride=old.stride,
        padding=old.padding,
        padding_mode=old.padding_mode,
        bias=bank.bias is not None,
    ).to(old.weight.dtype)
    with torch.no_grad():
        conv.weight.copy_(bank.weight)
        if bank.bias is not None:
            conv.bias.copy_(bank.bias)
    return conv


def inflate_first_conv(model: nn.Module, extra: int, init: str = "random", seed: int | None = 0) -> nn.Module:
    """Return a copy of ``model`` whose first convolution accepts ``extra`` more channels."""
    model = copy.deepcopy(model)
    old = model.first_conv
    bank = expand_input_channels(ConvKernelBank.from_conv(old), extra, init, seed)
    model.first_conv = _conv_from_bank(old, bank)
    model.in_channels = bank.in_channels
    if hasattr(model, "spec"):
        model.spec = BackboneSpec(**{**model.spec.to_dict(), "input_channels": bank.in_channels})
    return model


# ---------------------------------------------------------------------------
# building blocks


class ShapeCheck(nn.Module):
    def _check_input(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"{type(self).__name__} expects N x {self.in_channels} x H x W, got {tuple(x.shape)}")


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + (x if self.shortcut is None else self.shortcut(x)))


def _stage_widths(width: int, depth: int) -> list[tuple[int, int, int]]:
    """(cin, cout, stride) per block: first half at ``width``, second half at ``2*width``."""
    first = max(1, depth // 2)
    blocks, cin = [], width
    for i in range(depth):
        cout = width if i < first else 2 * width
        stride = 2 if i == first else 1
        blocks.append((cin, cout, stride))
        cin = cout
    return blocks


class SmallResNetClassifier(ShapeCheck):
    """Stem conv, ``depth`` basic blocks in two stages, global pooling, linear head."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.in_channels = spec.input_channels
        w = spec.width
        self.first_conv = nn.Conv2d(spec.input_channels, w, 3, spec.stem_stride, 1, bias=False)
        self.stem_bn = nn.BatchNorm2d(w)
        self.blocks = nn.Sequential(*[BasicBlock(*b) for b in _stage_widths(w, spec.depth)])
        self.head = nn.Linear(self.blocks[-1].bn2.num_features, spec.num_outputs)

    def features(self, x):
        self._check_input(x)
        return self.blocks(F.relu(self.stem_bn(self.first_conv(x))))

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class ResidualBlockIN(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(ShapeCheck):
    """Encoder, ``depth`` residual blocks, decoder; sigmoid output in (0, 1).

    Same layout as the nine-block image transformation network, reduced to
    one down/up-sampling step for small inputs.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.in_channels = spec.input_channels
        w = spec.width
        self.first_conv = nn.Conv2d(spec.input_channels, w, 5, padding=2, padding_mode="reflect")
        self.encoder = nn.Sequential(
            nn.InstanceNorm2d(w),
            nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(),
        )
        self.res = nn.Sequential(*[ResidualBlockIN(2 * w) for _ in range(spec.depth)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(),
            nn.Conv2d(w, spec.num_outputs, 5, padding=2, padding_mode="reflect"),
        )

    def forward(self, x):
        self._check_input(x)
        h = self.encoder(self.first_conv(x))
        return torch.sigmoid(self.decoder(self.res(h)))


class PatchDiscriminator(ShapeCheck):
    """``depth``-layer patch critic producing an unbounded realness map."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.in_channels = spec.input_channels
        w = spec.width
        self.first_conv = nn.Conv2d(spec.input_channels, w, 4, stride=2, padding=1)
        layers: list[nn.Module] = [nn.LeakyReLU(0.2)]
        ch = w
        for _ in range(spec.depth - 2):
            layers += [nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * ch), nn.LeakyReLU(0.2)]
            ch *= 2
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        self._check_input(x)
        return self.body(self.first_conv(x))


class ModDropNet(ShapeCheck):
    """Two per-modality branches fused by channel concatenation.

    Each branch is a stem plus the first residual stage. While training,
    every sample independently loses one branch's feature map with
    probability ``p_branch`` per branch, conditioned on never losing both.
    ``missing`` zeroes a branch deterministically (used when a modality is
    absent at test time).
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.in_channels = spec.input_channels
        self.split = tuple(spec.branch_channels)
        w = spec.width
        stage = _stage_widths(w, spec.depth)
        first = max(1, spec.depth // 2)

        def branch(cin):
            return nn.ModuleDict(
                {
                    "conv": nn.Conv2d(cin, w, 3, spec.stem_stride, 1, bias=False),
                    "bn": nn.BatchNorm2d(w),
                    "blocks": nn.Sequential(*[BasicBlock(*b) for b in stage[:first]]),
                }
            )

        self.branches = nn.ModuleList([branch(c) for c in self.split])
        trunk = [(2 * w, 2 * w, 2)] + [(2 * w, 2 * w, 1)] * max(0, spec.depth - first - 1)
        self.trunk = nn.Sequential(*[BasicBlock(*b) for b in trunk])
        self.head = nn.Linear(2 * w, spec.num_outputs)
        self.p_branch = spec.p_branch
        self.branch_rng: torch.Generator | None = None

    @property
    def first_conv(self):
        return self.branches[0]["conv"]

    def branch_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        self._check_input(x)
        parts = torch.split(x, list(self.split), dim=1)
        return [b["blocks"](F.relu(b["bn"](b["conv"](p)))) for b, p in zip(self.branches, parts)]

    def draw_branch_mask(self, n: int) -> torch.Tensor:
        """``n x 2`` keep-mask; rows never drop both branches."""
        p = self.p_branch
        # rejection of the both-dropped outcome, done as one categorical draw
        weights = torch.tensor([(1 - p) ** 2, p * (1 - p), (1 - p) * p], dtype=torch.float64)
        if weights.sum() == 0:
            weights = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        idx = torch.multinomial(weights, n, replacement=True, generator=self.branch_rng)
        table = torch.tensor([[1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        return table[idx]

    def fuse(self, feats: Sequence[torch.Tensor], keep: torch.Tensor | None = None) -> torch.Tensor:
        if keep is not None:
            feats = [f * keep[:, i].to(f.dtype).view(-1, 1, 1, 1) for i, f in enumerate(feats)]
        return torch.cat(list(feats), dim=1)

    def forward(self, x: torch.Tensor, missing: Sequence[int] = ()) -> torch.Tensor:
        feats = self.branch_features(x)
        keep = None
        if self.training and self.p_branch > 0:
            keep = self.draw_branch_mask(x.shape[0])
        if missing:
            keep = torch.ones(x.shape[0], 2) if keep is None else keep.clone()
            keep[:, list(missing)] = 0.0
        fused = self.fuse(feats, keep)
        return self.head(self.trunk(fused).mean(dim=(2, 3)))


_BUILDERS = {
    BackboneKind.SMALL_RESNET_CLASSIFIER: SmallResNetClassifier,
    BackboneKind.RESNET_GENERATOR: ResnetGenerator,
    BackboneKind.PATCH_DISCRIMINATOR: PatchDiscriminator,
    BackboneKind.MODDROP_BRANCH_NET: ModDropNet,
}


def build_backbone(spec: BackboneSpec, seed: int = 0, dtype: torch.dtype = torch.float32) -> nn.Module:
    """Construct a model whose initial parameters depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _BUILDERS[spec.kind](spec)
    return model.to(dtype)


def build_moddrop_baseline(spec: BackboneSpec, seed: int = 0, dtype: torch.dtype = torch.float32) -> ModDropNet:
    if spec.kind is not BackboneKind.MODDROP_BRANCH_NET:
        spec = BackboneSpec(**{**spec.to_dict(), "kind": BackboneKind.MODDROP_BRANCH_NET})
    return build_backbone(spec, seed, dtype)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: nn.Module, path: str | Path, spec: BackboneSpec | None = None) -> Path:
    """Write a flat ``.npz`` of named arrays plus ``format_version`` and spec JSON."""
    spec = spec or getattr(model, "spec", None)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["format_version"] = np.array(CHECKPOINT_FORMAT_VERSION, dtype=np.int64)
    arrays["spec_json"] = np.array(json.dumps(spec.to_dict() if spec else None, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], BackboneSpec | None]:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        spec_d = json.loads(str(data["spec_json"]))
        state = {k[len("param/") :]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    spec = BackboneSpec(**spec_d) if spec_d else None
    return state, spec


def load_model(path: str | Path) -> nn.Module:
    state, spec = load_checkpoint(path)
    if spec is None:
        raise ValueError("checkpoint carries no backbone spec")
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model = build_backbone(spec, 0, dtype if dtype.is_floating_point else torch.float32)
    model.load_state_dict(state)
    return model
