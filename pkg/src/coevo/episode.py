"""One evaluation episode: decode, build, control loop, reward, termination.

The control loop runs inside a single numba kernel. ``observe``,
``step_reward`` and ``termination_check`` are thin wrappers over the same
kernels the loop uses, so the Python API and the fast path cannot drift
apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .bauplan import BauplanTemplate, Genotype, decode, split_genotype
from .policy import MOTOR_NOISE_STD, OBS_CLIP, ObsStats, PolicyParams, PolicyShape, forward_kernel
from .sim2d import (
    PhysicsConfig,
    StepReport,
    WorldState,
    _contact_flags,
    build_world,
    control_step_ws,
    kinematics,
    make_workspace,
)

REASONS = ("completed", "fell", "tipped", "body_contact", "overspeed", "diverged")
COMPLETED, FELL, TIPPED, BODY_CONTACT, OVERSPEED, DIVERGED = range(6)
REWARD_FIELDS = ("progress", "limit_penalty", "contact_penalty", "energy_penalty", "overspeed_penalty", "total")

# packed EpisodeConfig layout
_LIMIT_PEN, _CONTACT_PEN, _ENERGY, _OVERSPEED_PEN, _VLINK, _VJOINT, _MAX_PITCH, _MIN_H, _DT, _TX, _TZ, _LTOL, _JMODE = range(13)

JOINT_SPEED_SCALE = 10.0


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 1000
    control_dt: float = 1.0 / 60.0
    target_position: tuple[float, float] = (1000.0, 0.0)
    joint_limit_penalty: float = 0.0
    contact_penalty: float = 0.0
    energy_coeff: float = 0.0
    overspeed_penalty: float = 10.0
    overspeed_link_speed: float = 5.0
    overspeed_joint_speed: float = 5.0
    # "anchor": joint speed is the linear speed of the joint anchor (m/s);
    # "angular": joint speed is the relative angular rate (rad/s)
    joint_speed_measure: str = "anchor"
    # None: take the thresholds from the template
    max_pitch: float | None = None
    min_torso_height: float | None = None
    perturbation_range: float = 0.1
    initial_height: float = 0.1
    motor_noise: float = MOTOR_NOISE_STD
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.energy_coeff not in (0.0, 0.001, 0.002):
            raise ValueError(f"energy_coeff must be 0, 0.001 or 0.002, got {self.energy_coeff}")
        if self.joint_speed_measure not in ("anchor", "angular"):
            raise ValueError(f"joint_speed_measure must be 'anchor' or 'angular', got {self.joint_speed_measure!r}")

    def packed(self, tpl: BauplanTemplate) -> np.ndarray:
        max_pitch = self.max_pitch if self.max_pitch is not None else tpl.termination.max_pitch
        min_h = self.min_torso_height if self.min_torso_height is not None else tpl.termination.min_torso_height
        return np.array(
            [
                self.joint_limit_penalty,
                self.contact_penalty,
                self.energy_coeff,
                self.overspeed_penalty,
                self.overspeed_link_speed,
                self.overspeed_joint_speed,
                np.inf if max_pitch is None else max_pitch,
                -np.inf if min_h is None else min_h,
                self.control_dt,
                self.target_position[0],
                self.target_position[1],
                self.physics.limit_tolerance,
                1.0 if self.joint_speed_measure == "angular" else 0.0,
            ]
        )


def default_episode_config(tpl: BauplanTemplate, **overrides) -> EpisodeConfig:
    """Per-bauplan penalty settings."""
    kw: dict = {}
    if tpl.kind == "halfcheetah":
        kw["joint_limit_penalty"] = 0.1
    elif tpl.is_chain:
        kw["contact_penalty"] = 0.1
        kw["energy_coeff"] = 0.002 if len(tpl.elements) >= 13 else 0.001
    kw.update(overrides)
    return EpisodeConfig(**kw)


@dataclass
class RewardBreakdown:
    progress: float = 0.0
    limit_penalty: float = 0.0
    contact_penalty: float = 0.0
    energy_penalty: float = 0.0
    overspeed_penalty: float = 0.0
    total: float = 0.0

    @classmethod
    def from_array(cls, a) -> "RewardBreakdown":
        return cls(*(float(x) for x in a))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in REWARD_FIELDS])


@dataclass
class EpisodeResult:
    fitness: float
    steps_executed: int
    termination_reason: str
    distance_traveled: float
    rewards: RewardBreakdown
    obs_count: int = 0
    obs_mean: np.ndarray | None = None
    obs_m2: np.ndarray | None = None
    trace: dict | None = None


@dataclass(frozen=True)
class _Body:
    torso: int
    root_rest: float
    act_idx: np.ndarray
    sensors: np.ndarray
    forbidden: np.ndarray


def _body(tpl: BauplanTemplate) -> _Body:
    return _Body(
        torso=tpl.element_index(tpl.torso),
        root_rest=tpl.root_angle,
        act_idx=np.array([j for j, jt in enumerate(tpl.joints) if jt.actuated], dtype=np.int64),
        sensors=np.array([tpl.element_index(n) for n in tpl.contact_sensors], dtype=np.int64),
        forbidden=np.array([tpl.element_index(n) for n in tpl.forbidden_contacts], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _wrap(a):
    return math.atan2(math.sin(a), math.cos(a))


@njit(cache=True)
def _observe_kernel(model, q, qd, ws, torso, root_rest, start_z, target_x, target_z, act_idx, sensors, ctol, flags, out):
    length, radius, mass, lower, upper = model[1], model[2], model[3], model[7], model[8]
    pos, ang, vel, omg, vanc, anc, theta, thetad = ws[0], ws[1], ws[2], ws[3], ws[4], ws[5], ws[6], ws[7]
    kinematics(model, q, qd, pos, ang, vel, omg, vanc, anc, theta, thetad)
    mt = 0.0
    vx = 0.0
    vz = 0.0
    for i in range(mass.shape[0]):
        mt += mass[i]
        vx += mass[i] * vel[i, 0]
        vz += mass[i] * vel[i, 1]
    tx = pos[torso, 0]
    tz = pos[torso, 1]
    pitch = _wrap(ang[torso] - root_rest)
    heading = math.atan2(target_z - tz, target_x - tx) - pitch
    out[0] = tz - start_z
    out[1] = math.sin(heading)
    out[2] = math.cos(heading)
    out[3] = vx / mt
    out[4] = vz / mt
    out[5] = pitch
    out[6] = omg[torso]
    out[7] = vel[torso, 1]
    k = 8
    for j in act_idx:
        span = upper[j] - lower[j]
        if span > 0.0:
            out[k] = 2.0 * (theta[j] - 0.5 * (lower[j] + upper[j])) / span
        else:
            out[k] = 0.0
        out[k + 1] = thetad[j] / JOINT_SPEED_SCALE
        k += 2
    _contact_flags(length, radius, pos, ang, ctol, flags)
    for s in sensors:
        out[k] = 1.0 if flags[s] else 0.0
        k += 1


@njit(cache=True)
def _limit_count(theta, lower, upper, act_idx, ltol):
    n = 0
    for j in act_idx:
        if upper[j] > lower[j] and (theta[j] <= lower[j] + ltol or theta[j] >= upper[j] - ltol):
            n += 1
    return n


@njit(cache=True)
def _reward_kernel(d_before, d_after, n_limit, n_contact, torque_abs, vmax, wmax, cfg, out):
    out[0] = (d_before - d_after) / cfg[_DT]
    out[1] = -cfg[_LIMIT_PEN] * n_limit
    out[2] = -cfg[_CONTACT_PEN] * n_contact
    out[3] = -cfg[_ENERGY] * torque_abs
    out[4] = -cfg[_OVERSPEED_PEN] if (vmax > cfg[_VLINK] or wmax > cfg[_VJOINT]) else 0.0
    out[5] = out[0] + out[1] + out[2] + out[3] + out[4]


@njit(cache=True)
def _termination_kernel(pitch, torso_z, flags, forbidden, vmax, wmax, cfg):
    if abs(pitch) > cfg[_MAX_PITCH]:
        return TIPPED
    if torso_z < cfg[_MIN_H]:
        return FELL
    for f in forbidden:
        if flags[f]:
            return BODY_CONTACT
    if vmax > cfg[_VLINK] or wmax > cfg[_VJOINT]:
        return OVERSPEED
    return COMPLETED


@njit(cache=True)
def _episode_kernel(
    model, phys, n_sub, cfg, torso, root_rest, act_idx, sensors, forbidden,
    w1, b1, w2, b2, omean, ostd, noise, q, qd, p, max_steps,
    smean, sm2, totals, do_trace, tr_time, tr_pose, tr_angle, tr_contact, tr_reward,
):
    length, max_torque, lower, upper = model[1], model[11], model[7], model[8]
    nl = length.shape[0]
    nj = max(nl - 1, 1)
    ws = make_workspace(nl, q.shape[0])
    pos, ang, vel, omg, vanc, anc, theta, thetad = ws[0], ws[1], ws[2], ws[3], ws[4], ws[5], ws[6], ws[7]
    n_in = smean.shape[0]
    n_out = b2.shape[0]
    obs = np.zeros(n_in)
    z = np.zeros(n_in)
    hidden = np.zeros(b1.shape[0])
    act = np.zeros(n_out)
    tau = np.zeros(nj)
    applied = np.zeros(nj)
    limit_hit = np.zeros(nj, dtype=np.bool_)
    flags = np.zeros(nl, dtype=np.bool_)
    report = np.zeros(4)
    rew = np.zeros(6)
    dt = cfg[_DT]
    h = dt / n_sub
    ctol = phys[5]
    ltol = cfg[_LTOL]
    tx_t = cfg[_TX]
    tz_t = cfg[_TZ]

    kinematics(model, q, qd, pos, ang, vel, omg, vanc, anc, theta, thetad)
    start_x = pos[torso, 0]
    start_z = pos[torso, 1]
    d_before = math.hypot(tx_t - start_x, tz_t - start_z)
    end_x = start_x
    fitness = 0.0
    count = 0
    reason = COMPLETED
    steps = max_steps
    for t in range(max_steps):
        _observe_kernel(model, q, qd, ws, torso, root_rest, start_z, tx_t, tz_t, act_idx, sensors, ctol, flags, obs)
        count += 1
        for i in range(n_in):
            delta = obs[i] - smean[i]
            smean[i] += delta / count
            sm2[i] += delta * (obs[i] - smean[i])
            zi = (obs[i] - omean[i]) / ostd[i]
            if zi > OBS_CLIP:
                zi = OBS_CLIP
            elif zi < -OBS_CLIP:
                zi = -OBS_CLIP
            z[i] = zi
        forward_kernel(w1, b1, w2, b2, z, noise[t], hidden, act)
        for k in range(act_idx.shape[0]):
            a = act[k]
            if a > 1.0:
                a = 1.0
            elif a < -1.0:
                a = -1.0
            tau[act_idx[k]] = a * max_torque[act_idx[k]]
        ok = control_step_ws(model, phys, q, qd, p, tau, h, n_sub, applied, limit_hit, flags, report, ws)
        if ok < 0:
            for k in range(6):
                rew[k] = 0.0
            rew[4] = -cfg[_OVERSPEED_PEN]
            rew[5] = rew[4]
            for k in range(6):
                totals[k] += rew[k]
            fitness += rew[5]
            reason = DIVERGED
            steps = t + 1
            if do_trace:
                tr_time[t] = (t + 1) * dt
                for k in range(6):
                    tr_reward[t, k] = rew[k]
            break
        tx = pos[torso, 0]
        tz = pos[torso, 1]
        end_x = tx
        d_after = math.hypot(tx_t - tx, tz_t - tz)
        n_limit = _limit_count(theta, lower, upper, act_idx, ltol)
        n_contact = 0
        for i in range(nl):
            if flags[i]:
                n_contact += 1
        tabs = 0.0
        for j in act_idx:
            tabs += abs(applied[j])
        jspeed = report[1] if cfg[_JMODE] > 0.5 else report[3]
        _reward_kernel(d_before, d_after, n_limit, n_contact, tabs, report[0], jspeed, cfg, rew)
        for k in range(6):
            totals[k] += rew[k]
        fitness += rew[5]
        d_before = d_after
        if do_trace:
            tr_time[t] = (t + 1) * dt
            for i in range(nl):
                tr_pose[t, i, 0] = pos[i, 0]
                tr_pose[t, i, 1] = pos[i, 1]
                tr_pose[t, i, 2] = ang[i]
                tr_contact[t, i] = flags[i]
            for j in range(nl - 1):
                tr_angle[t, j] = theta[j]
            for k in range(6):
                tr_reward[t, k] = rew[k]
        pitch = _wrap(ang[torso] - root_rest)
        code = _termination_kernel(pitch, tz, flags, forbidden, report[0], jspeed, cfg)
        if code != COMPLETED:
            reason = code
            steps = t + 1
            break
    return fitness, steps, reason, end_x - start_x, count


# ---------------------------------------------------------------------------
# Python API


def _config_arrays(tpl: BauplanTemplate, config: EpisodeConfig):
    return config.packed(tpl), config.physics.packed()


def observe(world: WorldState, tpl: BauplanTemplate, target=(1000.0, 0.0), start_z: float | None = None) -> np.ndarray:
    """Raw observation vector of length ``n_inputs``.

    ``start_z`` is the torso height at the start of the episode; by default
    the current torso height is used.
    """
    body = _body(tpl)
    model = world.model
    ws = make_workspace(model.n_links, model.n_coords)
    if start_z is None:
        pos = ws[0]
        kinematics(model.kernel_args(), world.q, world.qd, *ws[:8])
        start_z = float(pos[body.torso, 1])
    out = np.zeros(tpl.policy_shape()[0])
    flags = np.zeros(model.n_links, dtype=np.bool_)
    _observe_kernel(
        model.kernel_args(), world.q, world.qd, ws, body.torso, body.root_rest, start_z, float(target[0]),
        float(target[1]), body.act_idx, body.sensors, model.physics.contact_tolerance, flags, out,
    )
    return out


def _torso_pose(world: WorldState, torso: int):
    model = world.model
    ws = make_workspace(model.n_links, model.n_coords)
    kinematics(model.kernel_args(), world.q, world.qd, *ws[:8])
    return ws[0][torso].copy(), float(ws[1][torso]), ws[6].copy()


def _joint_speed(report: StepReport, config: EpisodeConfig) -> float:
    return report.max_joint_speed if config.joint_speed_measure == "angular" else report.max_anchor_speed


def step_reward(world_before: WorldState, world_after: WorldState, tpl: BauplanTemplate, config: EpisodeConfig,
                report: StepReport) -> RewardBreakdown:
    body = _body(tpl)
    cfg, _ = _config_arrays(tpl, config)
    tx, tz = config.target_position
    pb, _, _ = _torso_pose(world_before, body.torso)
    pa, _, theta = _torso_pose(world_after, body.torso)
    d_before = math.hypot(tx - pb[0], tz - pb[1])
    d_after = math.hypot(tx - pa[0], tz - pa[1])
    m = world_after.model
    n_limit = _limit_count(theta, m.lower, m.upper, body.act_idx, config.physics.limit_tolerance)
    flags = world_after.contact_flags
    if flags is None:
        from .sim2d import link_contacts

        flags = link_contacts(world_after)
    out = np.zeros(6)
    _reward_kernel(
        d_before, d_after, n_limit, int(np.sum(flags)), float(np.abs(report.applied_torques).sum()),
        report.max_link_speed, _joint_speed(report, config), cfg, out,
    )
    return RewardBreakdown.from_array(out)


def termination_check(world: WorldState, tpl: BauplanTemplate, config: EpisodeConfig | None = None) -> str | None:
    """First triggered rule among tipped, fell, body_contact, overspeed; else None."""
    config = config or default_episode_config(tpl)
    body = _body(tpl)
    cfg, _ = _config_arrays(tpl, config)
    model = world.model
    ws = make_workspace(model.n_links, model.n_coords)
    kinematics(model.kernel_args(), world.q, world.qd, *ws[:8])
    pos, ang, vel, vanc, thetad = ws[0], ws[1], ws[2], ws[4], ws[7]
    flags = world.contact_flags
    if flags is None:
        from .sim2d import link_contacts

        flags = link_contacts(world)
    vmax = float(np.sqrt((vel**2).sum(axis=1)).max())
    nj = model.n_joints
    if not nj:
        wmax = 0.0
    elif config.joint_speed_measure == "angular":
        wmax = float(np.abs(thetad[:nj]).max())
    else:
        wmax = float(np.sqrt((vanc[:nj] ** 2).sum(axis=1)).max())
    pitch = float(_wrap(ang[body.torso] - body.root_rest))
    code = _termination_kernel(pitch, float(pos[body.torso, 1]), flags, body.forbidden, vmax, wmax, cfg)
    return None if code == COMPLETED else REASONS[code]


def episode_streams(seed) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the initial perturbation and the motor noise."""
    ss = np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def initial_world(tpl: BauplanTemplate, morph, config: EpisodeConfig, seed) -> WorldState:
    plan = decode(tpl, morph)
    pert_rng, _ = episode_streams(seed)
    r = config.perturbation_range
    pert = pert_rng.uniform(-r, r, size=tpl.n_actuated)
    return build_world(plan, pert, config.initial_height, physics=config.physics)


def run_episode(
    genotype: Genotype,
    tpl: BauplanTemplate,
    config: EpisodeConfig | None = None,
    seed=0,
    obs_stats: ObsStats | None = None,
    trace: bool = False,
) -> EpisodeResult:
    """Evaluate one genotype for one episode.

    Deterministic given ``(genotype, seed, obs_stats)``. A genotype with
    ``n_morph == 0`` runs on the template's default body.
    """
    config = config or default_episode_config(tpl)
    shape = PolicyShape(*tpl.policy_shape())
    morph, ctrl = split_genotype(genotype)
    params = PolicyParams.unflatten(ctrl, shape)
    world = initial_world(tpl, morph, config, seed)
    _, noise_rng = episode_streams(seed)
    noise = config.motor_noise * noise_rng.standard_normal((config.max_steps, shape.n_outputs))
    if obs_stats is None:
        obs_stats = ObsStats.empty(shape.n_inputs)
    omean, ostd = obs_stats.normalizer()

    body = _body(tpl)
    model = world.model
    cfg, phys = _config_arrays(tpl, config)
    T = config.max_steps if trace else 1
    nl, nj = model.n_links, max(model.n_joints, 1)
    tr_time = np.zeros(T)
    tr_pose = np.zeros((T, nl, 3))
    tr_angle = np.zeros((T, nj))
    tr_contact = np.zeros((T, nl), dtype=np.bool_)
    tr_reward = np.zeros((T, 6))
    smean = np.zeros(shape.n_inputs)
    sm2 = np.zeros(shape.n_inputs)
    totals = np.zeros(6)
    fitness, steps, reason, dist, count = _episode_kernel(
        model.kernel_args(), phys, config.physics.n_substeps, cfg, body.torso, body.root_rest, body.act_idx,
        body.sensors, body.forbidden, params.w1, params.b1, params.w2, params.b2, omean, ostd, noise,
        world.q, world.qd, world.p, config.max_steps, smean, sm2, totals, trace,
        tr_time, tr_pose, tr_angle, tr_contact, tr_reward,
    )
    result = EpisodeResult(
        fitness=float(fitness),
        steps_executed=int(steps),
        termination_reason=REASONS[reason],
        distance_traveled=float(dist),
        rewards=RewardBreakdown.from_array(totals),
        obs_count=int(count),
        obs_mean=smean,
        obs_m2=sm2,
    )
    if trace:
        n = int(steps)
        result.trace = {
            "time": tr_time[:n],
            "link_poses": tr_pose[:n],
            "joint_angles": tr_angle[:n, : model.n_joints],
            "contacts": tr_contact[:n],
            "rewards": tr_reward[:n],
        }
    return result
