"""Parameter providers used when assembling layers.

Builders ask a provider for every array by name, so the same assembly code
serves random initialization, zero skeletons and checkpoint loading.
"""

from __future__ import annotations

import numpy as np

from repmlp.errors import DimensionError, FormatError
from repmlp.tensor import BN_EPS, DTYPE


class RandomInit:
    """Deterministic uniform fan-in initialization from a seed.

    Weights and biases are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    BN statistics are drawn around the identity so that random networks look
    like trained ones without blowing up activations.
    """

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, name, shape, kind, fan_in=1):
        rng = self.rng
        if kind in ("weight", "bias"):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(DTYPE)
        if kind == "bn.mu":
            return rng.uniform(-0.1, 0.1, size=shape).astype(DTYPE)
        if kind == "bn.sigma":
            return np.sqrt(rng.uniform(0.5, 1.5, size=shape) + BN_EPS).astype(DTYPE)
        if kind == "bn.gamma":
            return rng.uniform(0.5, 1.5, size=shape).astype(DTYPE)
        if kind == "bn.beta":
            return rng.uniform(-0.1, 0.1, size=shape).astype(DTYPE)
        raise ValueError(f"unknown parameter kind {kind!r}")


class ZeroInit:
    """All-zero skeleton, with unit sigma so BN layers stay valid."""

    def __call__(self, name, shape, kind, fan_in=1):
        if kind == "bn.sigma":
            return np.ones(shape, dtype=DTYPE)
        return np.zeros(shape, dtype=DTYPE)


class StateInit:
    """Serve arrays from a ``name -> array`` mapping, checking shapes."""

    def __init__(self, state):
        self.state = state
        self.used = set()

    def __call__(self, name, shape, kind, fan_in=1):
        try:
            arr = self.state[name]
        except KeyError:
            raise FormatError(f"missing tensor {name!r}") from None
        if tuple(arr.shape) != tuple(shape):
            raise DimensionError(f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}")
        self.used.add(name)
        return arr

    def check_consumed(self):
        extra = sorted(set(self.state) - self.used)
        if extra:
            raise FormatError(f"unexpected tensors {extra[:5]}")
