"""Shared fixtures and finite-difference helpers."""

import numpy as np
import pytest

from deskdiff import diffusion, model
from deskdiff.model import Architecture


TINY_ARCH = Architecture(
    height=2, width=2, channels=1, embed_dim=3, time_dim=2, hidden=(5,), timesteps=4
)


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


@pytest.fixture
def tiny_sched():
    return diffusion.build_schedule(TINY_ARCH.timesteps, 0.05, 0.3)


def make_tiny(rng, arch=TINY_ARCH):
    return model.init_params(arch, rng)


def numeric_grad(f, pdict, h=1e-6):
    """Central finite differences of a scalar function over a named dict.

    ``f`` must recompute the objective from the current array contents;
    entries are perturbed in place and restored.
    """
    out = {}
    for name, p in pdict.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def rel_err(a, b):
    num = np.linalg.norm(np.asarray(a) - np.asarray(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return num / den
