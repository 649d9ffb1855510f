"""Seeding and determinism helpers."""

from __future__ import annotations

import random

import numpy as np
import torch


def seed_everything(seed: int) -> None:
    """Seed every RNG the toolkit touches (python, numpy, torch)."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def configure_determinism(enabled: bool = True) -> None:
    """Force torch onto deterministic kernels (bitwise-reproducible forwards)."""
    torch.use_deterministic_algorithms(enabled)


def pick_device(name: str | None = None) -> torch.device:
    if name is not None:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")
