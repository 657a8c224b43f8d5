"""Multimodal image stacks and Input Dropout masking.

A batch is a dense ``N x C x H x W`` tensor whose channels are split into
named, contiguous modality ranges. During training one modality per sample
is zeroed at random; at inference the additional modality is always zeroed.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import torch


class LayoutError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class UnsupportedLayoutError(ValueError):
    pass


class DropoutMode(str, Enum):
    ADDIT = "addit"
    BOTH = "both"


class Phase(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class MaskCase(str, Enum):
    KEPT_ALL = "kept_all"
    DROPPED_ADDITIONAL = "dropped_additional"
    DROPPED_CANONICAL = "dropped_canonical"


@dataclass(frozen=True)
class ModalityLayout:
    """Ordered ``(name, channel_count)`` entries tiling the channel axis."""

    entries: tuple[tuple[str, int], ...]
    canonical: str = "rgb"

    def __post_init__(self):
        entries = tuple((str(n), int(c)) for n, c in self.entries)
        object.__setattr__(self, "entries", entries)
        names = [n for n, _ in entries]
        if not entries:
            raise LayoutError("layout needs at least one modality")
        if any(not n for n in names):
            raise LayoutError("modality names must be non-empty")
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate modality names in {names}")
        if any(c <= 0 for _, c in entries):
            raise LayoutError("channel counts must be positive")
        if self.canonical not in names:
            raise LayoutError(f"canonical modality {self.canonical!r} not in {names}")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def total_channels(self) -> int:
        return sum(c for _, c in self.entries)

    def channel_range(self, name: str) -> tuple[int, int]:
        start = 0
        for n, c in self.entries:
            if n == name:
                return start, start + c
            start += c
        raise KeyError(name)

    def ranges(self) -> dict[str, tuple[int, int]]:
        return {n: self.channel_range(n) for n in self.names}

    @property
    def additional(self) -> list[str]:
        return [n for n in self.names if n != self.canonical]

    def to_dict(self) -> dict:
        return {"entries": [list(e) for e in self.entries], "canonical": self.canonical}

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityLayout":
        return cls(tuple(tuple(e) for e in d["entries"]), d.get("canonical", "rgb"))


@dataclass
class MultimodalBatch:
    data: torch.Tensor
    layout: ModalityLayout

    def __post_init__(self):
        if self.data.dim() != 4:
            raise AlignmentError(f"expected N x C x H x W, got shape {tuple(self.data.shape)}")
        if self.data.shape[1] != self.layout.total_channels:
            raise LayoutError(
                f"batch has {self.data.shape[1]} channels, layout declares {self.layout.total_channels}"
            )

    def __len__(self) -> int:
        return self.data.shape[0]

    def modality(self, name: str) -> torch.Tensor:
        lo, hi = self.layout.channel_range(name)
        return self.data[:, lo:hi]


@dataclass(frozen=True)
class DropoutPolicy:
    """How modalities are dropped at training time.

    In ``addit`` mode only the additional modality can be dropped, with
    probability ``p_drop``. In ``both`` mode the additional and the canonical
    modality are each dropped with probability ``p_drop`` and everything is
    kept otherwise, so ``p_drop = 1/3`` gives three equiprobable cases.
    """

    mode: DropoutMode = DropoutMode.ADDIT
    p_drop: float | None = None
    rng_stream: str = "input_dropout"

    def __post_init__(self):
        object.__setattr__(self, "mode", DropoutMode(self.mode))
        if self.p_drop is None:
            default = 0.5 if self.mode is DropoutMode.ADDIT else 1.0 / 3.0
            object.__setattr__(self, "p_drop", default)
        p = float(self.p_drop)
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p_drop must lie in [0, 1], got {p}")
        if self.mode is DropoutMode.BOTH and p > 0.5:
            raise ValueError("both mode needs p_drop <= 0.5 (two drop cases share the mass)")
        object.__setattr__(self, "p_drop", p)

    def case_probabilities(self) -> dict[MaskCase, float]:
        p = self.p_drop
        if self.mode is DropoutMode.ADDIT:
            return {MaskCase.KEPT_ALL: 1.0 - p, MaskCase.DROPPED_ADDITIONAL: p}
        return {
            MaskCase.KEPT_ALL: 1.0 - 2.0 * p,
            MaskCase.DROPPED_ADDITIONAL: p,
            MaskCase.DROPPED_CANONICAL: p,
        }


@dataclass(frozen=True)
class MaskRecord:
    cases: tuple[MaskCase, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.cases)


def concat_modalities(
    parts: Sequence[tuple[str, torch.Tensor]], canonical: str | None = None
) -> MultimodalBatch:
    """Stack modalities along the channel axis in list order.

    The first part is the canonical modality unless ``canonical`` names
    another one.
    """
    if not parts:
        raise LayoutError("no modalities given")
    names = [n for n, _ in parts]
    if len(set(names)) != len(names):
        raise LayoutError(f"duplicate modality names in {names}")
    ref = parts[0][1]
    for name, t in parts:
        if t.dim() != 4:
            raise AlignmentError(f"modality {name!r} is not rank 4")
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise AlignmentError(
                f"modality {name!r} has shape {tuple(t.shape)}, expected N={ref.shape[0]} "
                f"and HxW={tuple(ref.shape[2:])}"
            )
    layout = ModalityLayout(tuple((n, t.shape[1]) for n, t in parts), canonical or names[0])
    data = parts[0][1] if len(parts) == 1 else torch.cat([t for _, t in parts], dim=1)
    return MultimodalBatch(data, layout)


def _two_modalities(layout: ModalityLayout) -> str:
    if len(layout.entries) != 2:
        raise UnsupportedLayoutError(
            f"Input Dropout supports exactly one canonical plus one additional modality, got {layout.names}"
        )
    return layout.additional[0]


def mask_for_inference(
    batch: MultimodalBatch, layout: ModalityLayout | None = None, available: Iterable[str] = ()
) -> MultimodalBatch:
    """Zero every modality not listed in ``available``."""
    layout = layout or batch.layout
    available = set(available)
    unknown = available - set(layout.names)
    if unknown:
        raise LayoutError(f"unknown modalities {sorted(unknown)}")
    if layout.canonical not in available:
        raise LayoutError(f"canonical modality {layout.canonical!r} must be available")
    missing = [n for n in layout.names if n not in available]
    if not missing:
        return MultimodalBatch(batch.data.clone(), layout)
    out = batch.data.clone()
    for name in missing:
        lo, hi = layout.channel_range(name)
        out[:, lo:hi] = 0.0
    return MultimodalBatch(out, layout)


def draw_cases(n: int, policy: DropoutPolicy, rng: torch.Generator | None) -> list[MaskCase]:
    """One case per sample from a single uniform draw each."""
    u = torch.rand(n, generator=rng, dtype=torch.float64)
    p = policy.p_drop
    cases = []
    for v in u.tolist():
        if v < p:
            cases.append(MaskCase.DROPPED_ADDITIONAL)
        elif policy.mode is DropoutMode.BOTH and v < 2.0 * p:
            cases.append(MaskCase.DROPPED_CANONICAL)
        else:
            cases.append(MaskCase.KEPT_ALL)
    return cases


def apply_input_dropout(
    batch: MultimodalBatch,
    policy: DropoutPolicy,
    phase: Phase | str = Phase.TRAIN,
    rng: torch.Generator | None = None,
) -> tuple[MultimodalBatch, MaskRecord]:
    """Zero whole modalities per sample.

    Training draws a fresh case for every sample on each call. Evaluation
    ignores ``rng`` and zeroes the additional modality everywhere.
    """
    layout = batch.layout
    extra = _two_modalities(layout)
    phase = Phase(phase)
    if phase is Phase.EVAL:
        out = mask_for_inference(batch, layout, {layout.canonical})
        return out, MaskRecord((MaskCase.DROPPED_ADDITIONAL,) * len(batch))

    cases = draw_cases(len(batch), policy, rng)
    out = batch.data.clone()
    for case, name in (
        (MaskCase.DROPPED_ADDITIONAL, extra),
        (MaskCase.DROPPED_CANONICAL, layout.canonical),
    ):
        rows = [i for i, c in enumerate(cases) if c is case]
        if rows:
            lo, hi = layout.channel_range(name)
            out[rows, lo:hi] = 0.0
    return MultimodalBatch(out, layout), MaskRecord(tuple(cases))


def mask_statistics(records: Sequence[MaskRecord]) -> dict[MaskCase, float]:
    """Empirical frequency of each case over all samples in ``records``."""
    counts: Counter = Counter()
    for rec in records:
        counts.update(rec.cases)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("mask_statistics needs at least one recorded sample")
    return {case: counts[case] / total for case in MaskCase if counts[case]}
