import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coevo.bauplan import (
    KINDS,
    BauplanError,
    Genotype,
    LayoutError,
    decode,
    genotype_layout,
    join_genotype,
    load_manifest,
    split_genotype,
    template,
    write_manifest,
)
from coevo.sim2d import build_world

LAYOUTS = {
    "walker2d": (14, 1456),
    "halfcheetah": (34, 1656),
    "chain7": (32, 1706),
    "chain13": (62, 2912),
}


@pytest.mark.parametrize("kind,expected", LAYOUTS.items())
def test_genotype_layout(kind, expected):
    tpl = template(kind)
    assert tpl.n_morph_params == expected[0]
    assert genotype_layout(tpl) == expected


@pytest.mark.parametrize(
    "kind,shape", [("walker2d", (22, 50, 6)), ("chain7", (27, 50, 6)), ("chain13", (45, 50, 12))]
)
def test_explicit_policy_shape(kind, shape):
    tpl = template(kind)
    assert tpl.policy_shape() == shape
    assert genotype_layout(tpl, shape) == LAYOUTS[kind]


def test_chain_aliases():
    assert template("chain(7)") is template("chain7")
    assert template("Chain-13").kind == "chain13"


def test_unknown_kind():
    with pytest.raises(BauplanError):
        template("hopper")


def test_zero_params_decode_to_defaults():
    tpl = template("walker2d")
    body = decode(tpl, np.zeros(14))
    for e, t in zip(body.elements, tpl.elements):
        assert e.length == t.length and e.radius == t.radius
    for j, t in zip(body.joints, tpl.joints):
        assert j.rest_angle == t.rest_angle
        assert j.lower == pytest.approx(t.rest_angle + t.lower, abs=1e-15)
        assert j.upper == pytest.approx(t.rest_angle + t.upper, abs=1e-15)


def test_empty_vector_is_default_body():
    tpl = template("halfcheetah")
    a, b = decode(tpl, []), decode(tpl, np.zeros(34))
    assert a.elements == b.elements and a.joints == b.joints


def test_torso_length_saturates_at_plus_20_percent():
    tpl = template("walker2d")
    p = np.zeros(14)
    p[[s.name for s in tpl.morph_specs].index("torso_length")] = 10.0
    body = decode(tpl, p)
    torso = tpl.element_index("torso")
    assert body.elements[torso].length == pytest.approx(tpl.elements[torso].length * 1.2, abs=1e-4)


def test_chain_rest_angle_decoding():
    tpl = template("chain7")
    p = np.zeros(32)
    k = [s.name for s in tpl.morph_specs].index("j1_rest")
    p[k] = 0.5
    body = decode(tpl, p)
    assert math.degrees(body.joints[0].rest_angle) == pytest.approx(62.39, abs=0.005)
    assert body.joints[0].rest_angle == pytest.approx(math.tanh(0.5) * math.radians(135.0), abs=1e-15)


def test_wrong_length_raises():
    with pytest.raises(LayoutError):
        decode(template("walker2d"), np.zeros(13))


def _check_bounds(tpl, body):
    for spec in tpl.morph_specs:
        v = body.morph_values[spec.name]
        lo = spec.default_value - abs(spec.min_offset)
        hi = spec.default_value + abs(spec.max_offset)
        assert lo - 1e-12 <= v <= hi + 1e-12
    for e in body.elements:
        assert e.length > 0 and e.radius > 0 and e.mass > 0
    for j in body.joints:
        assert j.lower <= j.rest_angle <= j.upper


@pytest.mark.parametrize("kind", KINDS)
def test_extreme_parameters_decode_inside_ranges(kind):
    tpl = template(kind)
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.choice([-1e9, 1e9, -1.0, 0.0, 1.0], size=tpl.n_morph_params)
        body = decode(tpl, p)
        _check_bounds(tpl, body)
        n_act = tpl.n_actuated
        build_world(body, np.zeros(n_act))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e9, 1e9), min_size=14, max_size=14))
def test_walker_decoding_total(values):
    tpl = template("walker2d")
    _check_bounds(tpl, decode(tpl, values))


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.floats(0, 50), st.integers(0, 13))
def test_length_monotone(x, dx, idx):
    tpl = template("chain7")
    i = idx % 7
    p = np.zeros(32)
    p[2 * i] = x
    a = decode(tpl, p).elements[i].length
    p[2 * i] = x + dx
    b = decode(tpl, p).elements[i].length
    assert b >= a


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=14, max_size=14))
def test_walker_legs_share_values(values):
    tpl = template("walker2d")
    body = decode(tpl, values)
    el = {e.name: e for e in body.elements}
    jt = {j.name: j for j in body.joints}
    for part in ("thigh", "leg", "foot"):
        a, b = el[f"{part}_r"], el[f"{part}_l"]
        assert (a.length, a.radius, a.mass) == (b.length, b.radius, b.mass)
    for part in ("hip", "knee", "ankle"):
        a, b = jt[f"{part}_r"], jt[f"{part}_l"]
        assert (a.rest_angle, a.lower, a.upper) == (b.rest_angle, b.lower, b.upper)


def test_decode_is_pure():
    tpl = template("chain13")
    p = np.random.default_rng(2).normal(size=62)
    before = p.copy()
    a, b = decode(tpl, p), decode(tpl, p)
    assert np.array_equal(p, before)
    assert a.elements == b.elements and a.joints == b.joints


def test_split_walker_genotype():
    v = np.arange(1470, dtype=float)
    morph, ctrl = split_genotype(Genotype(v, 14, 1456))
    assert np.array_equal(morph, v[:14]) and np.array_equal(ctrl, v[14:])


def test_split_join_round_trip():
    v = np.random.default_rng(1).normal(size=1470)
    g = join_genotype(*split_genotype(Genotype(v, 14, 1456)))
    assert np.array_equal(g.values, v)
    assert (g.n_morph, g.n_ctrl) == (14, 1456)


def test_split_zero_vector():
    morph, ctrl = split_genotype(Genotype(np.zeros(1470), 14, 1456))
    assert not morph.any() and not ctrl.any()


def test_genotype_length_mismatch():
    with pytest.raises(LayoutError):
        Genotype(np.zeros(1469), 14, 1456)


@pytest.mark.parametrize("kind", KINDS)
def test_manifest_round_trip(kind, tmp_path):
    tpl = template(kind)
    again = load_manifest(write_manifest(tpl, tmp_path / f"{kind}.json"))
    assert again == tpl
