"""Mirrored-sampling evolution strategy with centered ranks, Adam and L1 decay.

A generation is ``ask`` → evaluate candidates (anywhere, in any order) →
``tell``. Noise vectors are a pure function of ``(master_seed, generation,
pair index)``, so a state plus a fitness sequence fully determines the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .policy import ObsStats


class StaleBatchError(ValueError):
    pass


@dataclass(frozen=True)
class ESConfig:
    population_size: int = 40
    sigma: float = 0.02
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay_coeff: float = 0.0005
    # "l1": sign step clamped at zero; "l2": multiplicative shrink
    weight_decay_norm: str = "l1"
    max_total_steps: int = 10**8

    def __post_init__(self):
        if self.population_size < 2 or self.population_size % 2:
            raise ValueError(f"population_size must be even and >= 2, got {self.population_size}")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay_coeff < 0:
            raise ValueError("weight_decay_coeff must be >= 0")
        if self.weight_decay_norm not in ("l1", "l2"):
            raise ValueError(f"weight_decay_norm must be 'l1' or 'l2', got {self.weight_decay_norm!r}")


@dataclass
class ESState:
    center: np.ndarray
    m: np.ndarray
    v: np.ndarray
    freeze_mask: np.ndarray
    master_seed: int
    update_count: int = 0
    generation: int = 0
    cumulative_env_steps: int = 0
    obs_stats: ObsStats | None = None

    @property
    def dim(self) -> int:
        return self.center.size

    def copy(self) -> "ESState":
        return ESState(
            self.center.copy(), self.m.copy(), self.v.copy(), self.freeze_mask.copy(), self.master_seed,
            self.update_count, self.generation, self.cumulative_env_steps,
            None if self.obs_stats is None else self.obs_stats.copy(),
        )


@dataclass(frozen=True)
class PerturbationBatch:
    generation: int
    noise: np.ndarray  # (λ/2, dim)
    candidates: np.ndarray  # (λ, dim); rows 2i and 2i+1 are center ± σ·noise[i]

    @property
    def signs(self) -> np.ndarray:
        return np.tile([1.0, -1.0], self.noise.shape[0])


@dataclass(frozen=True)
class FitnessBatch:
    fitness: np.ndarray
    env_steps: np.ndarray = field(default=None)

    def __post_init__(self):
        f = np.asarray(self.fitness, dtype=np.float64)
        s = np.zeros(f.size, dtype=np.int64) if self.env_steps is None else np.asarray(self.env_steps, dtype=np.int64)
        if s.shape != f.shape:
            raise ValueError("fitness and env_steps lengths differ")
        object.__setattr__(self, "fitness", f)
        object.__setattr__(self, "env_steps", s)


def es_init(dim: int, config: ESConfig | None = None, master_seed: int = 0, warm_start=None,
            freeze_mask=None, n_inputs: int | None = None) -> ESState:
    """Zero (or warm-started) center with fresh Adam moments."""
    if dim <= 0:
        raise ValueError("dim must be > 0")
    center = np.zeros(dim) if warm_start is None else np.array(warm_start, dtype=np.float64)
    if center.shape != (dim,):
        raise ValueError(f"warm start has {center.size} entries, expected {dim}")
    mask = np.zeros(dim, dtype=bool) if freeze_mask is None else np.array(freeze_mask, dtype=bool)
    if mask.shape != (dim,):
        raise ValueError(f"freeze mask has {mask.size} entries, expected {dim}")
    stats = ObsStats.empty(n_inputs) if n_inputs else None
    return ESState(center, np.zeros(dim), np.zeros(dim), mask, int(master_seed), obs_stats=stats)


def noise_vector(master_seed: int, generation: int, index: int, dim: int) -> np.ndarray:
    return np.random.default_rng([master_seed, generation, index]).standard_normal(dim)


def ask(state: ESState, config: ESConfig) -> PerturbationBatch:
    half = config.population_size // 2
    free = ~state.freeze_mask
    noise = np.empty((half, state.dim))
    for i in range(half):
        noise[i] = noise_vector(state.master_seed, state.generation, i, state.dim) * free
    cands = np.empty((config.population_size, state.dim))
    cands[0::2] = state.center + config.sigma * noise
    cands[1::2] = state.center - config.sigma * noise
    return PerturbationBatch(state.generation, noise, cands)


def centered_ranks(fitnesses) -> np.ndarray:
    """Ranks mapped linearly onto [-0.5, 0.5]; tied values share their average rank."""
    f = np.asarray(fitnesses, dtype=np.float64)
    n = f.size
    if n < 1:
        raise ValueError("need at least one fitness value")
    if n == 1:
        return np.zeros(1)
    order = np.argsort(f, kind="stable")
    sf = f[order]
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sf[j + 1] == sf[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j)
        i = j + 1
    return ranks / (n - 1) - 0.5


def adam_step(m, v, gradient, t: int, config: ESConfig):
    """Bias-corrected Adam for minimization; returns (delta, m', v')."""
    if t < 1:
        raise ValueError("t must be >= 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    m = b1 * m + (1.0 - b1) * gradient
    v = b2 * v + (1.0 - b2) * gradient * gradient
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    delta = -config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_eps)
    return delta, m, v


def apply_decay(center, coeff: float, norm: str, frozen) -> np.ndarray:
    if coeff == 0:
        return center
    if norm == "l1":
        decayed = np.sign(center) * np.maximum(np.abs(center) - coeff, 0.0)
    else:
        decayed = center * (1.0 - coeff)
    return np.where(frozen, center, decayed)


def estimate_gradient(batch: PerturbationBatch, utilities, sigma: float) -> np.ndarray:
    u = np.asarray(utilities)
    lam = u.size
    diff = u[0::2] - u[1::2]
    return diff @ batch.noise / (lam * sigma)


def tell(state: ESState, batch: PerturbationBatch, fitnesses, config: ESConfig, env_steps=None) -> ESState:
    """Return the updated state; ``state`` itself is left untouched."""
    if isinstance(fitnesses, FitnessBatch):
        fb = fitnesses
    else:
        fb = FitnessBatch(fitnesses, env_steps)
    if batch.generation != state.generation:
        raise StaleBatchError(f"batch from generation {batch.generation}, state is at {state.generation}")
    if fb.fitness.size != batch.candidates.shape[0]:
        raise ValueError(f"{fb.fitness.size} fitness values for {batch.candidates.shape[0]} candidates")
    utilities = centered_ranks(fb.fitness)
    g = estimate_gradient(batch, utilities, config.sigma)
    t = state.update_count + 1
    delta, m, v = adam_step(state.m, state.v, -g, t, config)
    frozen = state.freeze_mask
    center = np.where(frozen, state.center, state.center + delta)
    center = apply_decay(center, config.weight_decay_coeff, config.weight_decay_norm, frozen)
    return replace(
        state.copy(),
        center=center,
        m=np.where(frozen, 0.0, m),
        v=np.where(frozen, 0.0, v),
        update_count=t,
        generation=state.generation + 1,
        cumulative_env_steps=state.cumulative_env_steps + int(fb.env_steps.sum()),
    )


# ---------------------------------------------------------------------------
# checkpoint record

CHECKPOINT_VERSION = 1


def state_to_record(state: ESState, config: ESConfig) -> dict:
    rec = {
        "version": np.int64(CHECKPOINT_VERSION),
        "center": state.center,
        "adam_m": state.m,
        "adam_v": state.v,
        "freeze_mask": state.freeze_mask,
        "master_seed": np.int64(state.master_seed),
        "update_count": np.int64(state.update_count),
        "generation": np.int64(state.generation),
        "cumulative_env_steps": np.int64(state.cumulative_env_steps),
        "es_config": np.array([config.population_size, config.sigma, config.learning_rate, config.adam_beta1,
                               config.adam_beta2, config.adam_eps, config.weight_decay_coeff,
                               float(config.max_total_steps)]),
        "es_decay_norm": np.array(config.weight_decay_norm),
    }
    if state.obs_stats is not None:
        rec["obs_mean"] = state.obs_stats.mean
        rec["obs_m2"] = state.obs_stats.m2
        rec["obs_count"] = np.float64(state.obs_stats.count)
    return rec


def state_from_record(rec) -> tuple[ESState, ESConfig]:
    version = int(rec["version"])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    c = np.asarray(rec["es_config"], dtype=np.float64)
    config = ESConfig(
        population_size=int(c[0]), sigma=float(c[1]), learning_rate=float(c[2]), adam_beta1=float(c[3]),
        adam_beta2=float(c[4]), adam_eps=float(c[5]), weight_decay_coeff=float(c[6]),
        weight_decay_norm=str(rec["es_decay_norm"]), max_total_steps=int(c[7]),
    )
    stats = None
    if "obs_mean" in rec:
        stats = ObsStats(np.array(rec["obs_mean"]), np.array(rec["obs_m2"]), float(rec["obs_count"]))
    state = ESState(
        center=np.array(rec["center"], dtype=np.float64),
        m=np.array(rec["adam_m"], dtype=np.float64),
        v=np.array(rec["adam_v"], dtype=np.float64),
        freeze_mask=np.array(rec["freeze_mask"], dtype=bool),
        master_seed=int(rec["master_seed"]),
        update_count=int(rec["update_count"]),
        generation=int(rec["generation"]),
        cumulative_env_steps=int(rec["cumulative_env_steps"]),
        obs_stats=stats,
    )
    return state, config
