"""Experiment orchestration, persistence and statistics.

Run directory layout::

    <out>/manifest.json              experiment config and per-replication status
    <out>/seed_<s>/generations.csv   one row per generation (post-evaluation of the center)
    <out>/seed_<s>/checkpoint.npz    ES state, obs stats and drift samples (versioned)
    <out>/seed_<s>/drift.csv         drift series, written when the replication finishes

All randomness derives from the replication seed: training episodes of
generation ``g`` use seed ``[s, 0, g]``, post-evaluation episode ``k`` uses
``[s, 1, g, k]``. Rerunning (or resuming) with the same seed reproduces every
file byte for byte.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .bauplan import Genotype, template
from .episode import REWARD_FIELDS, EpisodeConfig, default_episode_config, run_episode
from .es import ESConfig, ESState, ask, es_init, state_from_record, state_to_record, tell
from .policy import ObsStats, PolicyShape

CONDITIONS = ("fixed", "coevolve", "preevolved")
BAUPLANS = ("walker2d", "halfcheetah", "chain7", "chain13")
CHECKPOINT_FORMAT = "coevo-checkpoint"
CHECKPOINT_VERSION = 1
TRAIN_STREAM, POSTEVAL_STREAM = 0, 1


class HarnessError(RuntimeError):
    pass


class CheckpointError(HarnessError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    bauplan: str = "walker2d"
    condition: str = "coevolve"
    preevolved_source: str | None = None
    replications: int = 20
    seed: int = 0
    seeds: tuple[int, ...] | None = None
    es: ESConfig = field(default_factory=ESConfig)
    episode: EpisodeConfig | None = None
    budget: int = 10**8
    drift_interval: int = 10**5
    posteval_episodes: int = 3
    checkpoint_every: int = 10
    workers: int = 1
    # morphological slice copied from the source run (pre-evolved condition)
    morph_source: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.bauplan not in BAUPLANS:
            raise HarnessError(f"unknown bauplan {self.bauplan!r}")
        if self.condition not in CONDITIONS:
            raise HarnessError(f"unknown condition {self.condition!r}")
        if self.condition == "preevolved" and self.preevolved_source is None and self.morph_source is None:
            raise HarnessError("the preevolved condition needs a source checkpoint")
        if self.budget <= 0 or self.drift_interval <= 0 or self.posteval_episodes < 1:
            raise HarnessError("budget, drift_interval and posteval_episodes must be positive")

    @property
    def replication_seeds(self) -> tuple[int, ...]:
        if self.seeds is not None:
            return tuple(int(s) for s in self.seeds)
        return tuple(self.seed + i for i in range(self.replications))

    def episode_config(self) -> EpisodeConfig:
        return self.episode or default_episode_config(template(self.bauplan))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["es"] = asdict(self.es)
        ep = self.episode_config()
        d["episode"] = {k: v for k, v in asdict(ep).items() if k != "physics"}
        d["episode"]["physics"] = asdict(ep.physics)
        d["seeds"] = list(self.replication_seeds)
        d["morph_source"] = None if self.morph_source is None else list(self.morph_source)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        from .sim2d import PhysicsConfig

        d = dict(d)
        if "es" in d and isinstance(d["es"], dict):
            d["es"] = ESConfig(**d["es"])
        if d.get("episode") is not None and isinstance(d["episode"], dict):
            ep = dict(d["episode"])
            if isinstance(ep.get("physics"), dict):
                ep["physics"] = PhysicsConfig(**ep["physics"])
            if "target_position" in ep:
                ep["target_position"] = tuple(ep["target_position"])
            d["episode"] = EpisodeConfig(**ep)
        if d.get("seeds") is not None:
            d["seeds"] = tuple(d["seeds"])
        if d.get("morph_source") is not None:
            d["morph_source"] = tuple(float(x) for x in d["morph_source"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise HarnessError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GenerationRecord:
    generation: int
    cumulative_env_steps: int
    posteval_fitness: float
    posteval_episodes: list[float]
    posteval_progress: list[float]
    posteval_distance: list[float]
    train_fitness_mean: float
    train_fitness_max: float
    center_ref: str = ""

    CSV_HEADER = (
        "generation", "cumulative_env_steps", "posteval_fitness", "posteval_episodes", "posteval_progress",
        "posteval_distance", "train_fitness_mean", "train_fitness_max", "center_ref",
    )

    def csv_row(self) -> list[str]:
        def vec(xs):
            return ";".join(repr(float(x)) for x in xs)

        return [
            str(self.generation), str(self.cumulative_env_steps), repr(float(self.posteval_fitness)),
            vec(self.posteval_episodes), vec(self.posteval_progress), vec(self.posteval_distance),
            repr(float(self.train_fitness_mean)), repr(float(self.train_fitness_max)), self.center_ref,
        ]

    @classmethod
    def from_csv_row(cls, row: dict) -> "GenerationRecord":
        def vec(s):
            return [float(x) for x in s.split(";")] if s else []

        return cls(
            generation=int(row["generation"]),
            cumulative_env_steps=int(row["cumulative_env_steps"]),
            posteval_fitness=float(row["posteval_fitness"]),
            posteval_episodes=vec(row["posteval_episodes"]),
            posteval_progress=vec(row["posteval_progress"]),
            posteval_distance=vec(row["posteval_distance"]),
            train_fitness_mean=float(row["train_fitness_mean"]),
            train_fitness_max=float(row["train_fitness_max"]),
            center_ref=row.get("center_ref", ""),
        )


@dataclass
class DriftSeries:
    steps: np.ndarray
    control: np.ndarray
    morph: np.ndarray

    def __len__(self) -> int:
        return self.steps.size


@dataclass
class ReplicationRecord:
    seed: int
    generations: list[GenerationRecord]
    drift: DriftSeries
    final_center: np.ndarray
    directory: Path


@dataclass
class RunRecord:
    config: ExperimentConfig
    replications: list[ReplicationRecord]
    directory: Path


# ---------------------------------------------------------------------------
# layout helpers


def genotype_dims(config: ExperimentConfig) -> tuple[int, int]:
    """(n_morph, n_ctrl) of the evolved genotype under ``config.condition``."""
    tpl = template(config.bauplan)
    n_ctrl = PolicyShape(*tpl.policy_shape()).n_params
    n_morph = 0 if config.condition == "fixed" else tpl.n_morph_params
    return n_morph, n_ctrl


def initial_state(config: ExperimentConfig, seed: int) -> ESState:
    tpl = template(config.bauplan)
    n_morph, n_ctrl = genotype_dims(config)
    dim = n_morph + n_ctrl
    warm = None
    mask = None
    if config.condition == "preevolved":
        morph = _preevolved_slice(config)
        warm = np.concatenate([morph, np.zeros(n_ctrl)])
        mask = np.zeros(dim, dtype=bool)
        mask[:n_morph] = True
    return es_init(dim, config.es, seed, warm_start=warm, freeze_mask=mask, n_inputs=tpl.policy_shape()[0])


def _preevolved_slice(config: ExperimentConfig) -> np.ndarray:
    if config.morph_source is not None:
        return np.array(config.morph_source, dtype=np.float64)
    frozen = freeze_morphology(config, config.preevolved_source)
    return np.array(frozen.morph_source, dtype=np.float64)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: ExperimentConfig, state: ESState, sampler: "DriftSampler") -> None:
    rec = state_to_record(state, config.es)
    rec["format"] = np.array(CHECKPOINT_FORMAT)
    rec["format_version"] = np.int64(CHECKPOINT_VERSION)
    rec["bauplan"] = np.array(config.bauplan)
    rec["condition"] = np.array(config.condition)
    n_morph, n_ctrl = genotype_dims(config)
    rec["n_morph"] = np.int64(n_morph)
    rec["n_ctrl"] = np.int64(n_ctrl)
    rec["experiment"] = np.array(json.dumps(config.to_dict(), sort_keys=True))
    rec.update(sampler.to_record())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    try:
        np.savez(tmp, **rec)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            rec = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "format" not in rec or str(rec["format"]) != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if int(rec["format_version"]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {int(rec['format_version'])}")
    return rec


def checkpoint_state(rec: dict) -> tuple[ESState, ESConfig]:
    return state_from_record(rec)


def checkpoint_genotype(rec: dict) -> Genotype:
    return Genotype(np.array(rec["center"]), int(rec["n_morph"]), int(rec["n_ctrl"]))


def freeze_morphology(config: ExperimentConfig, source) -> ExperimentConfig:
    """Pre-evolved condition: copy the source's morphology and freeze it."""
    rec = load_checkpoint(source)
    kind = str(rec["bauplan"])
    if kind != config.bauplan:
        raise HarnessError(f"source checkpoint is for {kind}, config is for {config.bauplan}")
    n_morph = int(rec["n_morph"])
    if n_morph == 0:
        raise HarnessError("source checkpoint has no morphological parameters (fixed condition)")
    center = np.asarray(rec["center"], dtype=np.float64)
    if center.size != n_morph + int(rec["n_ctrl"]):
        raise CheckpointError("malformed checkpoint: center size does not match its layout")
    return replace(
        config, condition="preevolved", preevolved_source=str(source),
        morph_source=tuple(float(x) for x in center[:n_morph]),
    )


# ---------------------------------------------------------------------------
# drift


class DriftSampler:
    """Streams (env_steps, center) pairs and keeps only the interval-boundary samples."""

    def __init__(self, interval: int, n_morph: int):
        self.interval = int(interval)
        self.n_morph = int(n_morph)
        self.boundaries: list[int] = []
        self.centers: list[np.ndarray] = []
        self.next_boundary = 0
        self.last: tuple[int, np.ndarray] | None = None

    def add(self, env_steps: int, center) -> None:
        while self.last is not None and self.next_boundary < env_steps:
            self._emit()
        self.last = (int(env_steps), np.array(center, dtype=np.float64))

    def _emit(self) -> None:
        if self.last[0] <= self.next_boundary:
            self.boundaries.append(self.next_boundary)
            self.centers.append(self.last[1])
        self.next_boundary += self.interval

    def finish(self) -> DriftSeries:
        if self.last is not None:
            while self.next_boundary <= self.last[0]:
                self._emit()
        return drift_from_samples(self.boundaries, self.centers, self.n_morph)

    def to_record(self) -> dict:
        dim = 0 if self.last is None else self.last[1].size
        return {
            "drift_interval": np.int64(self.interval),
            "drift_next": np.int64(self.next_boundary),
            "drift_boundaries": np.array(self.boundaries, dtype=np.int64),
            "drift_centers": np.array(self.centers).reshape(len(self.centers), dim),
            "drift_last_steps": np.int64(-1 if self.last is None else self.last[0]),
            "drift_last_center": np.zeros(dim) if self.last is None else self.last[1],
        }

    @classmethod
    def from_record(cls, rec: dict, n_morph: int) -> "DriftSampler":
        s = cls(int(rec["drift_interval"]), n_morph)
        s.next_boundary = int(rec["drift_next"])
        s.boundaries = [int(b) for b in rec["drift_boundaries"]]
        s.centers = [np.array(c) for c in rec["drift_centers"]]
        last = int(rec["drift_last_steps"])
        s.last = None if last < 0 else (last, np.array(rec["drift_last_center"]))
        return s


def drift_from_samples(boundaries, centers, n_morph: int) -> DriftSeries:
    if len(centers) < 2:
        return DriftSeries(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    c = np.asarray(centers, dtype=np.float64)
    d = np.abs(np.diff(c, axis=0))
    morph = d[:, :n_morph].mean(axis=1) if n_morph > 0 else np.zeros(d.shape[0])
    control = d[:, n_morph:].mean(axis=1)
    return DriftSeries(np.asarray(boundaries[1:], dtype=np.int64), control, morph)


def drift_series(history, interval: int, n_morph: int) -> DriftSeries:
    """Mean |Δ| of the control and morphological slices between interval boundaries.

    ``history`` is a sequence of ``(env_steps, center)`` sorted by steps; at
    each multiple of ``interval`` the latest center at or before it is taken.
    """
    hist = [(int(s), np.asarray(c, dtype=np.float64)) for s, c in history]
    if any(b[0] < a[0] for a, b in zip(hist, hist[1:])):
        raise ValueError("history must be sorted by env_steps")
    if not hist:
        return drift_from_samples([], [], n_morph)
    steps = np.array([s for s, _ in hist])
    bounds, cents = [], []
    b = 0
    while b <= steps[-1]:
        i = np.searchsorted(steps, b, side="right") - 1
        if i >= 0:
            bounds.append(b)
            cents.append(hist[i][1])
        b += interval
    return drift_from_samples(bounds, cents, n_morph)


# ---------------------------------------------------------------------------
# statistics


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


EXACT_MAX_N = 8


def mann_whitney_u(a, b, method: str = "auto") -> tuple[float, float]:
    """U statistic of ``a`` and its two-sided p-value.

    ``method='auto'`` enumerates every group assignment when both samples
    have at most 8 values and otherwise uses the tie-corrected normal
    approximation with continuity correction.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    na, nb = a.size, b.size
    ranks = _midranks(np.concatenate([a, b]))
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    if method == "auto":
        method = "exact" if max(na, nb) <= EXACT_MAX_N else "normal"
    mu = na * nb / 2.0
    if method == "exact":
        # enumerate which pooled positions go to ``a``
        n = na + nb
        dev = abs(u - mu)
        hits = 0
        count = 0
        for idx in itertools.combinations(range(n), na):
            ua = ranks[list(idx)].sum() - na * (na + 1) / 2.0
            count += 1
            if abs(ua - mu) >= dev - 1e-9:
                hits += 1
        return u, min(1.0, hits / count)
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")
    n = na + nb
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(((counts**3) - counts).sum())
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return u, min(1.0, math.erfc(z / math.sqrt(2.0)))


def bonferroni(pvals, k: int | None = None) -> list[float]:
    p = [float(x) for x in pvals]
    if any(not 0.0 <= x <= 1.0 for x in p):
        raise ValueError("p-values must lie in [0, 1]")
    k = len(p) if k is None else int(k)
    return [min(1.0, x * k) for x in p]


def bootstrap_ci(samples, level: float = 0.90, resamples: int = 10000, seed=0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("bootstrap needs at least two samples")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# evaluation


def _evaluate(kind: str, ep_cfg: EpisodeConfig, candidates: np.ndarray, n_morph: int, seed, stats: ObsStats):
    tpl = template(kind)
    n_ctrl = candidates.shape[1] - n_morph
    out = []
    for c in candidates:
        r = run_episode(Genotype(c, n_morph, n_ctrl), tpl, ep_cfg, seed, stats)
        out.append((r.fitness, r.steps_executed, r.obs_count, r.obs_mean, r.obs_m2))
    return out


class Evaluator:
    """Evaluates candidate batches serially or on a process pool, results in index order."""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._pool = ProcessPoolExecutor(self.workers) if self.workers > 1 else None

    def __call__(self, kind, ep_cfg, candidates, n_morph, seed, stats):
        if self._pool is None:
            return _evaluate(kind, ep_cfg, candidates, n_morph, seed, stats)
        chunks = np.array_split(candidates, self.workers)
        futs = [self._pool.submit(_evaluate, kind, ep_cfg, ch, n_morph, seed, stats) for ch in chunks if len(ch)]
        return [r for f in futs for r in f.result()]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def posteval(genotype: Genotype, kind: str, ep_cfg: EpisodeConfig, stats: ObsStats | None, seed: int,
             generation: int, episodes: int):
    tpl = template(kind)
    return [
        run_episode(genotype, tpl, ep_cfg, [seed, POSTEVAL_STREAM, generation, k], stats)
        for k in range(episodes)
    ]


def _merge_stats(stats: ObsStats, results) -> ObsStats:
    for _, _, count, mean, m2 in results:
        stats = stats.merge(count, mean, m2)
    return stats


def _rep_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


def _truncate_table(path: Path, generation: int) -> None:
    if not path.exists():
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= generation]
    with open(path, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(keep)


def read_generations(path) -> list[GenerationRecord]:
    with open(path, newline="") as f:
        return [GenerationRecord.from_csv_row(r) for r in csv.DictReader(f)]


def run_replication(config: ExperimentConfig, seed: int, out: Path, evaluator: Evaluator | None = None,
                    resume: bool = False, stop_after: int | None = None) -> ReplicationRecord:
    """Run (or continue) one replication until the budget is spent.

    ``stop_after`` ends the loop after that many generations of this call,
    without finishing the replication; used to simulate interruptions.
    """
    tpl = template(config.bauplan)
    ep_cfg = config.episode_config()
    n_morph, n_ctrl = genotype_dims(config)
    rdir = _rep_dir(out, seed)
    rdir.mkdir(parents=True, exist_ok=True)
    table = rdir / "generations.csv"
    ckpt = rdir / "checkpoint.npz"
    own_eval = evaluator is None
    evaluator = evaluator or Evaluator(config.workers)

    if resume and ckpt.exists():
        rec = load_checkpoint(ckpt)
        state, _ = state_from_record(rec)
        sampler = DriftSampler.from_record(rec, n_morph)
        _truncate_table(table, state.generation)
    else:
        state = initial_state(config, seed)
        sampler = DriftSampler(config.drift_interval, n_morph)
        sampler.add(0, state.center)
        with open(table, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(GenerationRecord.CSV_HEADER)
        save_checkpoint(ckpt, config, state, sampler)
    if state.obs_stats is None:
        state.obs_stats = ObsStats.empty(tpl.policy_shape()[0])

    done = 0
    try:
        with open(table, "a", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            while state.cumulative_env_steps < config.budget:
                if stop_after is not None and done >= stop_after:
                    return ReplicationRecord(seed, read_generations(table), DriftSeries(
                        np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)), state.center.copy(), rdir)
                batch = ask(state, config.es)
                results = evaluator(config.bauplan, ep_cfg, batch.candidates, n_morph,
                                    [seed, TRAIN_STREAM, state.generation], state.obs_stats)
                fit = np.array([r[0] for r in results])
                steps = np.array([r[1] for r in results], dtype=np.int64)
                new = tell(state, batch, fit, config.es, env_steps=steps)
                new.obs_stats = _merge_stats(state.obs_stats, results)
                state = new
                geno = Genotype(state.center, n_morph, n_ctrl)
                pe = posteval(geno, config.bauplan, ep_cfg, state.obs_stats, seed, state.generation,
                              config.posteval_episodes)
                sampler.add(state.cumulative_env_steps, state.center)
                finished = state.cumulative_env_steps >= config.budget
                save_now = finished or state.generation % config.checkpoint_every == 0
                grec = GenerationRecord(
                    generation=state.generation,
                    cumulative_env_steps=state.cumulative_env_steps,
                    posteval_fitness=float(np.mean([r.fitness for r in pe])),
                    posteval_episodes=[r.fitness for r in pe],
                    posteval_progress=[r.rewards.progress for r in pe],
                    posteval_distance=[r.distance_traveled for r in pe],
                    train_fitness_mean=float(fit.mean()),
                    train_fitness_max=float(fit.max()),
                    center_ref="checkpoint.npz" if save_now else "",
                )
                writer.writerow(grec.csv_row())
                f.flush()
                if save_now:
                    save_checkpoint(ckpt, config, state, sampler)
                done += 1
    finally:
        if own_eval:
            evaluator.close()

    drift = sampler.finish()
    write_drift(rdir / "drift.csv", drift)
    return ReplicationRecord(seed, read_generations(table), drift, state.center.copy(), rdir)


def write_drift(path, drift: DriftSeries) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["env_steps", "control_drift", "morph_drift"])
        for s, c, m in zip(drift.steps, drift.control, drift.morph):
            w.writerow([int(s), repr(float(c)), repr(float(m))])


def write_manifest(out: Path, config: ExperimentConfig, status: dict | None = None) -> None:
    from . import __version__

    doc = {"format": "coevo-run", "version": __version__, "config": config.to_dict(), "replications": status or {}}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(out) -> dict:
    path = Path(out) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise HarnessError(f"cannot read run manifest {path}: {exc}") from exc


def run_experiment(config: ExperimentConfig, out, resume: bool = False) -> RunRecord:
    """Run every replication of ``config`` into ``out``; replications run one after another,
    candidate evaluations within a generation use ``config.workers`` processes."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if config.condition == "preevolved" and config.morph_source is None:
        config = freeze_morphology(config, config.preevolved_source)
    write_manifest(out, config)
    reps = []
    status = {}
    with Evaluator(config.workers) as ev:
        for s in config.replication_seeds:
            rec = run_replication(config, s, out, ev, resume=resume)
            reps.append(rec)
            last = rec.generations[-1] if rec.generations else None
            status[str(s)] = {
                "generations": len(rec.generations),
                "cumulative_env_steps": last.cumulative_env_steps if last else 0,
                "final_posteval_fitness": last.posteval_fitness if last else None,
            }
            write_manifest(out, config, status)
    return RunRecord(config, reps, out)


def resume_experiment(out) -> RunRecord:
    doc = read_manifest(out)
    return run_experiment(ExperimentConfig.from_dict(doc["config"]), out, resume=True)


# ---------------------------------------------------------------------------
# export and reports


def export_trajectory(genotype: Genotype, kind: str, ep_cfg: EpisodeConfig | None, seed, path,
                      obs_stats: ObsStats | None = None) -> int:
    """Write one JSON line per control step; returns the number of frames."""
    tpl = template(kind)
    ep_cfg = ep_cfg or default_episode_config(tpl)
    res = run_episode(genotype, tpl, ep_cfg, seed, obs_stats, trace=True)
    tr = res.trace
    path = Path(path)
    try:
        with open(path, "w") as f:
            for t in range(res.steps_executed):
                frame = {
                    "step": t + 1,
                    "time": float(tr["time"][t]),
                    "links": [[float(v) for v in pose] for pose in tr["link_poses"][t]],
                    "joint_angles": [float(v) for v in tr["joint_angles"][t]],
                    "contacts": [int(v) for v in tr["contacts"][t]],
                    "reward": {k: float(v) for k, v in zip(REWARD_FIELDS, tr["rewards"][t])},
                }
                f.write(json.dumps(frame) + "\n")
    except OSError as exc:
        raise HarnessError(f"cannot write trajectory {path}: {exc}") from exc
    return res.steps_executed


def stat_report(runs: dict[str, list[list[GenerationRecord]]], level: float = 0.90, resamples: int = 10000,
                seed: int = 0) -> dict:
    """Compare conditions on final post-evaluation fitness.

    ``runs`` maps a condition label to its replications' generation tables.
    """
    finals = {c: [t[-1].posteval_fitness for t in tabs if t] for c, tabs in runs.items()}
    labels = sorted(finals)
    pairs = [(a, b) for i, a in enumerate(labels) for b in labels[i + 1 :] if finals[a] and finals[b]]
    tests = [(a, b, *mann_whitney_u(finals[a], finals[b])) for a, b in pairs]
    adj = bonferroni([t[3] for t in tests]) if tests else []
    curves = {}
    for c, tabs in runs.items():
        tabs = [t for t in tabs if t]
        n = min((len(t) for t in tabs), default=0)
        rows = []
        for g in range(n):
            vals = [t[g].posteval_fitness for t in tabs]
            steps = float(np.mean([t[g].cumulative_env_steps for t in tabs]))
            lo, hi = bootstrap_ci(vals, level, resamples, seed) if len(vals) >= 2 else (vals[0], vals[0])
            rows.append({"generation": tabs[0][g].generation, "mean_env_steps": steps,
                         "mean": float(np.mean(vals)), "ci_low": lo, "ci_high": hi})
        curves[c] = rows
    return {
        "final_posteval": finals,
        "comparisons": [
            {"a": a, "b": b, "U": u, "p": p, "p_bonferroni": q} for (a, b, u, p), q in zip(tests, adj)
        ],
        "ci_level": level,
        "curves": curves,
    }
