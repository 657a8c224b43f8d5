"""Input Dropout: train with extra input modalities, test on RGB alone."""

__version__ = "0.1.0"

from .modality import (
    DropoutMode,
    DropoutPolicy,
    MaskCase,
    ModalityLayout,
    MultimodalBatch,
    Phase,
    apply_input_dropout,
    concat_modalities,
    mask_for_inference,
    mask_statistics,
)
from .seeding import derive_seed

__all__ = [
    "DropoutMode",
    "DropoutPolicy",
    "MaskCase",
    "ModalityLayout",
    "MultimodalBatch",
    "Phase",
    "apply_input_dropout",
    "concat_modalities",
    "derive_seed",
    "mask_for_inference",
    "mask_statistics",
]
