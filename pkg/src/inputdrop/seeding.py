"""Seed derivation shared by the CLI and the experiment harness.

A derived seed is the low 64 bits of SHA-256 over the ASCII string
``master:<seed>:run:<i>:stream:<name>``. "Low 64 bits" means the last
eight digest bytes read as a big-endian unsigned integer, i.e. the digest
taken as one big-endian number modulo 2**64.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(master: int, run: int, stream: str) -> int:
    text = f"master:{master}:run:{run}:stream:{stream}"
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[-8:], "big")


def torch_generator(seed: int) -> torch.Generator:
    # torch seeds are accepted up to 2**64 - 1
    return torch.Generator().manual_seed(seed % (1 << 64))


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
