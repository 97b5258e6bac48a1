"""Optimizer/scheduler plumbing shared by the three trainable models."""
from __future__ import annotations

import logging
import math

import numpy as np
import torch

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDivergedError(RuntimeError):
    pass


def resolve_dtype(name: str) -> torch.dtype:
    try:
        return DTYPES[name]
    except KeyError:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {name!r}") from None


def seed_everything(seed: int) -> torch.Generator:
    """Seed torch's global RNG (parameter init) and return a dedicated generator."""
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def make_optimizer(params, lr: float, step_epochs: int, gamma: float):
    """Adam with step decay applied once per epoch."""
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(1, step_epochs), gamma=gamma)
    return opt, sched


def batches(n: int, batch_size: int, gen: torch.Generator, shuffle: bool = True):
    order = torch.randperm(n, generator=gen) if shuffle else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def check_finite(value: torch.Tensor, what: str, epoch: int):
    if not math.isfinite(float(value.detach())):
        raise TrainingDivergedError(f"{what} became non-finite ({float(value)}) at epoch {epoch}")


def rng_for(seed: int, *stream) -> np.random.Generator:
    """Independent numpy stream derived from ``(seed, *stream)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def torch_generator_for(seed: int, *stream) -> torch.Generator:
    s = np.random.SeedSequence([int(seed), *map(int, stream)]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(s) & 0x7FFF_FFFF_FFFF_FFFF)
