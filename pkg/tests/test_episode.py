import math

import numpy as np
import pytest
from scipy import stats as sps

from coevo.bauplan import KINDS, Genotype, decode, genotype_layout, template
from coevo.episode import (
    EpisodeConfig,
    default_episode_config,
    initial_world,
    observe,
    run_episode,
    step_reward,
    termination_check,
)
from coevo.policy import ObsStats
from coevo.sim2d import StepReport, build_world, link_kinematics, step_world

OBS_LENGTHS = {"walker2d": 22, "halfcheetah": 26, "chain7": 27, "chain13": 45}


def still_report(n_act):
    return StepReport(np.zeros(n_act), np.zeros(n_act, dtype=bool), 0.0, 0.0, 0.0, 0.0)


def zero_genotype(kind, scale=0.0, seed=0):
    n_morph, n_ctrl = genotype_layout(template(kind))
    v = np.random.default_rng(seed).normal(0.0, scale, n_morph + n_ctrl) if scale else np.zeros(n_morph + n_ctrl)
    return Genotype(v, n_morph, n_ctrl)


def world(kind, pert=None, height=0.1):
    tpl = template(kind)
    return build_world(decode(tpl, []), pert, height)


@pytest.mark.parametrize("kind", KINDS)
def test_observation_length_every_step(kind):
    tpl = template(kind)
    w = world(kind)
    rng = np.random.default_rng(0)
    for _ in range(30):
        assert observe(w, tpl).shape == (OBS_LENGTHS[kind],)
        w, _ = step_world(w, rng.uniform(-10, 10, tpl.n_actuated))


@pytest.mark.parametrize("kind", KINDS)
def test_still_start_has_zero_velocity_components(kind):
    tpl = template(kind)
    w = world(kind)
    obs = observe(w, tpl)
    vel_cols = [3, 4, 6, 7]  # centre-of-mass velocity, torso angular and vertical rates
    n_act = tpl.n_actuated
    joint_speeds = obs[8 + 1 : 8 + 2 * n_act : 2]
    assert np.array_equal(obs[vel_cols], np.zeros(4))
    assert np.array_equal(joint_speeds, np.zeros(n_act))


def test_halfcheetah_two_joints_at_limit():
    tpl = template("halfcheetah")
    pert = np.zeros(6)
    pert[0], pert[3] = 10.0, -10.0  # clipped onto the upper / lower limit
    w = world("halfcheetah", pert, height=1.0)
    cfg = default_episode_config(tpl)
    r = step_reward(w, w, tpl, cfg, still_report(6))
    assert r.limit_penalty == pytest.approx(-0.2)
    assert r.total == pytest.approx(-0.2, abs=1e-12)


def test_chain13_three_segments_touching():
    tpl = template("chain13")
    w = world("chain13", height=1.0)
    flags = np.zeros(13, dtype=bool)
    flags[[0, 5, 12]] = True
    w.contact_flags = flags
    r = step_reward(w, w, tpl, default_episode_config(tpl), still_report(12))
    assert r.contact_penalty == pytest.approx(-0.3)
    assert r.energy_penalty == 0.0
    assert r.total == pytest.approx(-0.3, abs=1e-12)


def test_still_world_zero_reward():
    tpl = template("walker2d")
    w = world("walker2d", height=1.0)
    r = step_reward(w, w, tpl, default_episode_config(tpl), still_report(6))
    assert r.total == 0.0


def test_energy_penalty_sums_torque_magnitudes():
    tpl = template("chain7")
    w = world("chain7", height=1.0)
    rep = still_report(6)
    rep.applied_torques[:] = [10, -10, 5, 0, 0, -5]
    r = step_reward(w, w, tpl, default_episode_config(tpl), rep)
    assert r.energy_penalty == pytest.approx(-0.001 * 30)


def test_unit_speed_translation_gives_unit_progress():
    # kinematic oracle: move the whole body 1 m/s along +x for one control step
    tpl = template("halfcheetah")
    cfg = default_episode_config(tpl)
    before = world("halfcheetah", height=0.5)
    after = build_world(decode(tpl, []), None, 0.5)
    after.q[0] += cfg.control_dt * 1.0
    r = step_reward(before, after, tpl, cfg, still_report(6))
    assert r.progress == pytest.approx(1.0, rel=1e-6)


def test_overspeed_penalty():
    tpl = template("walker2d")
    w = world("walker2d", height=1.0)
    rep = still_report(6)
    rep.max_link_speed = 6.0
    r = step_reward(w, w, tpl, default_episode_config(tpl), rep)
    assert r.overspeed_penalty == -10.0


def test_walker_low_torso_fell():
    tpl = template("walker2d")
    w = world("walker2d", height=1.0)
    pos, _, _, _ = link_kinematics(w)
    w.q[1] += 0.79 - pos[tpl.element_index("torso"), 1]
    assert termination_check(w, tpl) == "fell"


def test_cheetah_femur_contact():
    tpl = template("halfcheetah")
    w = world("halfcheetah", height=1.0)
    flags = np.zeros(8, dtype=bool)
    flags[tpl.element_index("bthigh")] = True
    w.contact_flags = flags
    assert termination_check(w, tpl) == "body_contact"


def test_upright_walker_continues():
    tpl = template("walker2d")
    w = world("walker2d", height=0.0)
    pos, ang, _, _ = link_kinematics(w)
    assert pos[tpl.element_index("torso"), 1] > 0.8
    assert termination_check(w, tpl) is None


def test_tipped_before_fell():
    tpl = template("walker2d")
    w = world("walker2d", height=0.0)
    w.q[2] += 1.2
    w.q[1] = -5.0
    assert termination_check(w, tpl) == "tipped"


def test_chain_only_overspeed():
    tpl = template("chain7")
    w = world("chain7", height=0.0)
    w.q[2] = 2.0
    assert termination_check(w, tpl) is None
    qd = np.zeros(w.qd.size)
    qd[0] = 6.0
    w.set_velocities(qd)
    assert termination_check(w, tpl) == "overspeed"


def test_zero_control_walker_falls():
    res = run_episode(zero_genotype("walker2d"), template("walker2d"), seed=0)
    assert res.termination_reason in ("fell", "tipped")
    assert res.steps_executed < 1000
    assert res.fitness <= 0.0


@pytest.mark.parametrize("kind", KINDS)
def test_episode_deterministic(kind):
    tpl = template(kind)
    g = zero_genotype(kind, 0.05, 1)
    a = run_episode(g, tpl, seed=(3, 4))
    b = run_episode(g, tpl, seed=(3, 4))
    assert a.fitness == b.fitness and a.steps_executed == b.steps_executed
    assert a.rewards == b.rewards and np.array_equal(a.obs_mean, b.obs_mean)


@pytest.mark.parametrize("kind", KINDS)
def test_fitness_is_sum_of_step_rewards(kind):
    tpl = template(kind)
    res = run_episode(zero_genotype(kind, 0.05, 2), tpl, seed=7, trace=True)
    steps = res.trace["rewards"]
    assert steps.shape == (res.steps_executed, 6)
    assert res.fitness == pytest.approx(steps[:, 5].sum(), abs=1e-9)
    assert np.allclose(steps[:, :5].sum(axis=1), steps[:, 5], atol=1e-12)
    assert res.rewards.total == pytest.approx(res.fitness, abs=1e-9)


def test_no_reward_after_termination():
    tpl = template("walker2d")
    g = zero_genotype("walker2d")
    res = run_episode(g, tpl, seed=2)
    assert res.steps_executed < 1000
    cut = run_episode(g, tpl, default_episode_config(tpl, max_steps=res.steps_executed), seed=2)
    assert cut.fitness == res.fitness
    assert cut.termination_reason == res.termination_reason


def test_obs_statistics_collected():
    tpl = template("chain7")
    res = run_episode(zero_genotype("chain7", 0.02), tpl, seed=0)
    assert res.obs_count == res.steps_executed
    assert res.obs_mean.shape == (27,)


def test_frozen_stats_change_behaviour_not_shape():
    tpl = template("chain7")
    g = zero_genotype("chain7", 0.05, 3)
    stats = ObsStats(np.ones(27), np.full(27, 4.0), 4.0)
    a = run_episode(g, tpl, seed=0, obs_stats=stats)
    b = run_episode(g, tpl, seed=0)
    assert a.fitness != b.fitness


def test_initial_perturbation_uniform():
    # chain joints rest mid-range, so the draws are never clipped
    tpl = template("chain7")
    cfg = default_episode_config(tpl)
    draws = []
    seed = 0
    while len(draws) < 10_000:
        draws.extend(initial_world(tpl, [], cfg, seed).joint_angles)
        seed += 1
    d = np.array(draws[:10_000])
    assert np.abs(d).max() <= 0.1
    assert sps.kstest(d, sps.uniform(loc=-0.1, scale=0.2).cdf).pvalue > 0.01


def test_energy_coefficient_validated():
    with pytest.raises(ValueError):
        EpisodeConfig(energy_coeff=0.01)


def test_default_penalties():
    assert default_episode_config(template("halfcheetah")).joint_limit_penalty == 0.1
    assert default_episode_config(template("walker2d")).joint_limit_penalty == 0.0
    c7, c13 = default_episode_config(template("chain7")), default_episode_config(template("chain13"))
    assert (c7.contact_penalty, c7.energy_coeff) == (0.1, 0.001)
    assert (c13.contact_penalty, c13.energy_coeff) == (0.1, 0.002)


def test_trace_fields():
    tpl = template("halfcheetah")
    res = run_episode(zero_genotype("halfcheetah", 0.02), tpl, seed=1, trace=True)
    n = res.steps_executed
    t = res.trace
    assert t["time"].shape == (n,) and t["link_poses"].shape == (n, 8, 3)
    assert t["joint_angles"].shape == (n, 7) and t["contacts"].shape == (n, 8)
    assert t["time"][0] == pytest.approx(1 / 60)
    assert math.isclose(t["time"][-1], n / 60, rel_tol=1e-9)
