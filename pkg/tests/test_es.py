import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from coevo.es import (
    ESConfig,
    PerturbationBatch,
    StaleBatchError,
    adam_step,
    apply_decay,
    ask,
    centered_ranks,
    es_init,
    estimate_gradient,
    state_from_record,
    state_to_record,
    tell,
)
from coevo.policy import ObsStats

NO_DECAY = ESConfig(weight_decay_coeff=0.0)


def sphere(x):
    return -np.sum(np.atleast_2d(x) ** 2, axis=1)


def test_init_dimension():
    s = es_init(1470, master_seed=3)
    assert s.center.shape == (1470,) and not s.center.any()
    assert s.m.shape == s.v.shape == (1470,)
    assert (s.generation, s.update_count, s.cumulative_env_steps) == (0, 0, 0)


def test_warm_start_exact():
    w = np.random.default_rng(0).normal(size=50)
    assert np.array_equal(es_init(50, warm_start=w).center, w)


def test_warm_start_length_checked():
    with pytest.raises(ValueError):
        es_init(10, warm_start=np.zeros(9))


@pytest.mark.parametrize("kw", [dict(population_size=3), dict(population_size=0), dict(sigma=0.0),
                                dict(learning_rate=-1.0), dict(weight_decay_norm="l3")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ESConfig(**kw)


def test_same_seed_same_noise():
    a, b = es_init(30, master_seed=9), es_init(30, master_seed=9)
    assert np.array_equal(ask(a, NO_DECAY).noise, ask(b, NO_DECAY).noise)
    assert not np.array_equal(ask(a, NO_DECAY).noise, ask(es_init(30, master_seed=10), NO_DECAY).noise)


def test_ask_repeatable():
    s = es_init(30, master_seed=1)
    a, b = ask(s, NO_DECAY), ask(s, NO_DECAY)
    assert np.array_equal(a.candidates, b.candidates)


def test_mirrored_pairs():
    s = es_init(20, master_seed=2, warm_start=np.linspace(-1, 1, 20))
    b = ask(s, NO_DECAY)
    assert b.candidates.shape == (40, 20)
    assert np.allclose(b.candidates[0::2] - s.center, -(b.candidates[1::2] - s.center), rtol=0, atol=1e-15)
    assert np.allclose(b.candidates[0::2], s.center + 0.02 * b.noise, rtol=0, atol=1e-15)


def test_all_frozen_candidates_equal_center():
    s = es_init(12, master_seed=0, warm_start=np.arange(12.0), freeze_mask=np.ones(12, bool))
    b = ask(s, NO_DECAY)
    assert np.array_equal(b.candidates, np.tile(s.center, (40, 1)))


def test_centered_ranks_examples():
    assert np.array_equal(centered_ranks([1.0, 3.0, 2.0]), [-0.5, 0.5, 0.0])
    assert np.array_equal(centered_ranks([4.0, 4.0, 4.0, 4.0]), np.zeros(4))
    assert np.array_equal(centered_ranks([1.0, 2.0, 2.0, 3.0]), [-0.5, 0.0, 0.0, 0.5])
    assert np.array_equal(centered_ranks([7.0]), [0.0])
    with pytest.raises(ValueError):
        centered_ranks([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40, unique=True))
def test_centered_ranks_invariant_to_monotone_maps(f):
    f = np.array(f)
    r = centered_ranks(f)
    for g in (np.arctan(f / 1e3) * 5 + 2, np.exp(f / 1e6), f**3):
        # only transforms that stay strictly increasing in floating point
        assume(np.unique(g).size == f.size)
        assert np.array_equal(r, centered_ranks(g))
    assert r.sum() == pytest.approx(0.0, abs=1e-12)


def test_one_dimensional_toy_update():
    cfg = ESConfig(population_size=2, sigma=1.0, learning_rate=0.01, weight_decay_coeff=0.0)
    batch = PerturbationBatch(0, np.array([[1.0]]), np.array([[1.0], [-1.0]]))
    assert estimate_gradient(batch, centered_ranks([2.0, 1.0]), 1.0)[0] == pytest.approx(0.5)
    s = tell(es_init(1), batch, [2.0, 1.0], cfg)
    assert s.center[0] == pytest.approx(0.01, rel=1e-6)


def test_adam_zero_gradient():
    d, m, v = adam_step(np.zeros(3), np.zeros(3), np.zeros(3), 1, ESConfig())
    assert not d.any() and not m.any() and not v.any()


def test_adam_first_step():
    g = np.array([0.3, -2.0, 1e-3])
    d, _, _ = adam_step(np.zeros(3), np.zeros(3), g, 1, ESConfig(learning_rate=0.01))
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(d, expected, rtol=1e-12, atol=0)
    assert np.allclose(d, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_constant_gradient_tends_to_lr():
    cfg = ESConfig(learning_rate=0.01)
    m = v = np.zeros(1)
    for t in range(1, 1001):
        d, m, v = adam_step(m, v, np.array([0.7]), t, cfg)
    assert abs(d[0]) == pytest.approx(0.01, rel=1e-6)


def test_equal_fitness_changes_only_by_decay():
    cfg = ESConfig(weight_decay_coeff=0.005)
    c = np.array([1.0, -0.002, 0.0, 0.3])
    s = es_init(4, master_seed=0, warm_start=c)
    s2 = tell(s, ask(s, cfg), np.ones(40), cfg)
    assert np.array_equal(s2.center, [0.995, 0.0, 0.0, 0.295])


def test_l2_decay():
    out = apply_decay(np.array([2.0, -1.0]), 0.1, "l2", np.zeros(2, bool))
    assert np.allclose(out, [1.8, -0.9])


def test_decay_converges_monotonically_to_zero():
    cfg = ESConfig(weight_decay_coeff=0.01)
    s = es_init(6, master_seed=0, warm_start=[1.0, -0.5, 0.25, -0.037, 0.0, 0.3])
    prev = np.abs(s.center)
    for _ in range(120):
        s = tell(s, ask(s, cfg), np.zeros(40), cfg)
        cur = np.abs(s.center)
        assert np.all(cur <= prev)
        prev = cur
    assert not s.center.any()


def test_freeze_mask_holds_for_100_generations():
    cfg = ESConfig()
    rng = np.random.default_rng(0)
    start = rng.normal(size=40)
    mask = np.zeros(40, bool)
    mask[:14] = True
    s = es_init(40, cfg, master_seed=5, warm_start=start, freeze_mask=mask)
    for _ in range(100):
        b = ask(s, cfg)
        s = tell(s, b, sphere(b.candidates), cfg)
        assert np.array_equal(s.center[:14], start[:14])
    assert not np.array_equal(s.center[14:], start[14:])
    assert not s.m[:14].any() and not s.v[:14].any()


def test_stale_batch_rejected():
    s = es_init(5)
    b = ask(s, NO_DECAY)
    s2 = tell(s, b, np.arange(40.0), NO_DECAY)
    with pytest.raises(StaleBatchError):
        tell(s2, b, np.arange(40.0), NO_DECAY)


def test_fitness_length_checked():
    s = es_init(5)
    with pytest.raises(ValueError):
        tell(s, ask(s, NO_DECAY), np.arange(39.0), NO_DECAY)


def test_tell_does_not_mutate_and_counts_steps():
    s = es_init(5)
    before = s.center.copy()
    s2 = tell(s, ask(s, NO_DECAY), np.arange(40.0), NO_DECAY, env_steps=np.full(40, 25))
    assert np.array_equal(s.center, before)
    assert s2.cumulative_env_steps == 1000 and s2.generation == 1 and s2.update_count == 1


def _trajectory(seed, gens=30):
    s = es_init(16, master_seed=seed, warm_start=np.ones(16))
    out = []
    for _ in range(gens):
        b = ask(s, NO_DECAY)
        s = tell(s, b, sphere(b.candidates), NO_DECAY)
        out.append(s.center)
    return np.array(out)


def test_runs_are_bit_reproducible():
    assert np.array_equal(_trajectory(4), _trajectory(4))


def test_checkpoint_round_trip():
    cfg = ESConfig(sigma=0.05, weight_decay_norm="l2", weight_decay_coeff=0.001)
    s = es_init(16, cfg, master_seed=8, warm_start=np.ones(16), n_inputs=3)
    s.obs_stats = ObsStats(np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.5, 0.5]), 7.0)
    for _ in range(5):
        b = ask(s, cfg)
        s = tell(s, b, sphere(b.candidates), cfg, env_steps=np.full(40, 3))
    r, rcfg = state_from_record(state_to_record(s, cfg))
    assert rcfg == cfg
    for name in ("center", "m", "v", "freeze_mask"):
        assert np.array_equal(getattr(r, name), getattr(s, name))
    assert (r.generation, r.update_count, r.cumulative_env_steps, r.master_seed) == (5, 5, 600, 8)
    assert np.array_equal(r.obs_stats.mean, s.obs_stats.mean) and r.obs_stats.count == 7.0
    # the continuation is identical
    b1, b2 = ask(s, cfg), ask(r, cfg)
    assert np.array_equal(tell(s, b1, sphere(b1.candidates), cfg).center,
                          tell(r, b2, sphere(b2.candidates), cfg).center)


def test_sphere_converges_with_small_step():
    cfg = ESConfig(population_size=40, sigma=0.02, learning_rate=0.001, weight_decay_coeff=0.0)
    s = es_init(100, cfg, master_seed=0, warm_start=np.random.default_rng(0).uniform(-1, 1, 100))
    for _ in range(2000):
        b = ask(s, cfg)
        s = tell(s, b, sphere(b.candidates), cfg)
    assert np.linalg.norm(s.center) < 0.01
