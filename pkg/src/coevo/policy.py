"""Feedforward controller, observation statistics and motor noise.

Control parameters are flattened in this order (row-major matrices)::

    W1 (n_hidden x n_inputs), b1 (n_hidden), W2 (n_outputs x n_hidden), b2 (n_outputs)

The order is part of the checkpoint format; do not change it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

MOTOR_NOISE_STD = 0.01
OBS_EPS = 1e-8
OBS_CLIP = 5.0


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyShape:
    n_inputs: int
    n_hidden: int = 50
    n_outputs: int = 6

    @property
    def n_params(self) -> int:
        return self.n_inputs * self.n_hidden + self.n_hidden * self.n_outputs + self.n_hidden + self.n_outputs

    def as_tuple(self) -> tuple[int, int, int]:
        return self.n_inputs, self.n_hidden, self.n_outputs


@dataclass
class PolicyParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def shape(self) -> PolicyShape:
        return PolicyShape(self.w1.shape[1], self.w1.shape[0], self.w2.shape[0])

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    @classmethod
    def unflatten(cls, flat, shape: PolicyShape) -> "PolicyParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (shape.n_params,):
            raise ShapeError(f"expected {shape.n_params} control parameters, got {flat.size}")
        ni, nh, no = shape.as_tuple()
        k = 0
        w1 = flat[k : k + nh * ni].reshape(nh, ni)
        k += nh * ni
        b1 = flat[k : k + nh]
        k += nh
        w2 = flat[k : k + no * nh].reshape(no, nh)
        k += no * nh
        b2 = flat[k : k + no]
        return cls(w1.copy(), b1.copy(), w2.copy(), b2.copy())

    @classmethod
    def zeros(cls, shape: PolicyShape) -> "PolicyParams":
        return cls.unflatten(np.zeros(shape.n_params), shape)


@njit(cache=True)
def forward_kernel(w1, b1, w2, b2, obs, noise, hidden, out):
    nh, ni = w1.shape
    no = w2.shape[0]
    for h in range(nh):
        s = b1[h]
        for i in range(ni):
            s += w1[h, i] * obs[i]
        hidden[h] = np.tanh(s)
    for o in range(no):
        s = b2[o]
        for h in range(nh):
            s += w2[o, h] * hidden[h]
        out[o] = s + noise[o]


def forward(params: PolicyParams, obs_normalized, noise_source=None, noise_std: float = MOTOR_NOISE_STD) -> np.ndarray:
    """tanh hidden layer, linear output, plus Gaussian motor noise.

    ``noise_source`` is a ``numpy.random.Generator``; ``None`` disables noise.
    """
    obs = np.asarray(obs_normalized, dtype=np.float64)
    if obs.shape != (params.w1.shape[1],):
        raise ShapeError(f"observation has {obs.size} components, network expects {params.w1.shape[1]}")
    no = params.w2.shape[0]
    if noise_source is None:
        noise = np.zeros(no)
    else:
        noise = noise_std * noise_source.standard_normal(no)
    out = np.empty(no)
    forward_kernel(params.w1, params.b1, params.w2, params.b2, obs, noise, np.empty(params.w1.shape[0]), out)
    return out


@dataclass
class ObsStats:
    """Running per-component mean and (population) variance."""

    mean: np.ndarray
    m2: np.ndarray
    count: float = 0.0

    @classmethod
    def empty(cls, n: int) -> "ObsStats":
        return cls(np.zeros(n), np.zeros(n), 0.0)

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.m2)
        return np.maximum(self.m2 / self.count, 0.0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance + OBS_EPS)

    def copy(self) -> "ObsStats":
        return ObsStats(self.mean.copy(), self.m2.copy(), self.count)

    def merge(self, count: float, mean, m2) -> "ObsStats":
        """Combine with a batch summary (Chan et al. parallel update)."""
        if count == 0:
            return self.copy()
        if self.count == 0:
            return ObsStats(np.array(mean, dtype=np.float64), np.array(m2, dtype=np.float64), float(count))
        n = self.count + count
        delta = mean - self.mean
        new_mean = self.mean + delta * (count / n)
        new_m2 = self.m2 + m2 + delta * delta * (self.count * count / n)
        return ObsStats(new_mean, new_m2, n)

    def normalizer(self) -> tuple[np.ndarray, np.ndarray]:
        """(mean, std) used by episodes; identity while no data has been seen."""
        if self.count == 0:
            return np.zeros_like(self.mean), np.ones_like(self.mean)
        return self.mean.copy(), self.std


def obs_update(stats: ObsStats, obs) -> ObsStats:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != stats.mean.shape:
        raise ShapeError(f"observation has {obs.size} components, stats track {stats.mean.size}")
    n = stats.count + 1
    delta = obs - stats.mean
    mean = stats.mean + delta / n
    m2 = stats.m2 + delta * (obs - mean)
    return ObsStats(mean, m2, n)


def obs_normalize(stats: ObsStats, obs) -> np.ndarray:
    if stats.count < 1:
        raise ValueError("observation statistics are uninitialized")
    z = (np.asarray(obs, dtype=np.float64) - stats.mean) / stats.std
    return np.clip(z, -OBS_CLIP, OBS_CLIP)
