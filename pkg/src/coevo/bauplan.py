"""Body templates and decoding of the morphological genotype segment.

Hand-designed templates (Walker2D, Halfcheetah) are loaded from the JSON
manifests in ``coevo/manifests``; chain templates of ``n`` identical
elements are generated. The manifest schema (``schema_version`` 1)::

    kind, density (kg/m^3), max_torque (N m), root_angle (rad), torso
    elements:  [{name, length, radius, parent, anchor}]
    joints:    [{name, parent, child, rest_angle, lower, upper, actuated}]
    morph_specs: [{name, target: {kind, name, property}, default,
                   min_offset, max_offset, shared_with: [target, ...]}]
    contact_sensors, forbidden_contacts: [element names]
    termination: {max_pitch, min_torso_height}

``anchor`` is the attachment point on the parent as a fraction of the
parent's length along its axis (+0.5 is the distal end). Joint ``lower``
and ``upper`` are relative to ``rest_angle``. Lengths and radii are in
metres, angles in radians.

Every morphological parameter ``p`` is squashed with ``tanh`` and mapped
linearly onto its offset range, so any real vector decodes to a valid body.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

N_HIDDEN = 50
OBS_BODY_BLOCK = 8

CHAIN_LENGTH = 0.5
CHAIN_RADIUS = 0.05
CHAIN_LENGTH_RANGE = 0.25
CHAIN_RADIUS_RANGE = 0.025
CHAIN_REST_RANGE = math.radians(135.0)
CHAIN_LIMIT_RANGE = math.radians(180.0)
# limits of an undecoded chain joint, relative to its rest angle
CHAIN_BASE_LIMIT = math.radians(90.0)
# smallest range of motion a decoded actuated joint may have (rad)
MIN_JOINT_SPAN = 0.05

PROPERTIES = ("length", "radius", "rest_angle", "lower_limit_offset", "upper_limit_offset")


class BauplanError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Target:
    kind: str  # "element" or "joint"
    name: str
    property: str


@dataclass(frozen=True)
class MorphParamSpec:
    name: str
    target: Target
    default_value: float
    min_offset: float
    max_offset: float
    shared_with: tuple[Target, ...] = ()

    def decode(self, p: float) -> float:
        t = math.tanh(p)
        return self.default_value + (t * self.max_offset if t >= 0.0 else -t * self.min_offset)


@dataclass(frozen=True)
class ElementTemplate:
    name: str
    length: float
    radius: float
    parent: str | None
    anchor: float | None


@dataclass(frozen=True)
class JointTemplate:
    name: str
    parent: str
    child: str
    rest_angle: float
    lower: float
    upper: float
    actuated: bool = True


@dataclass(frozen=True)
class Termination:
    max_pitch: float | None = None
    min_torso_height: float | None = None


@dataclass(frozen=True)
class BauplanTemplate:
    kind: str
    elements: tuple[ElementTemplate, ...]
    joints: tuple[JointTemplate, ...]
    morph_specs: tuple[MorphParamSpec, ...]
    root_angle: float
    torso: str
    contact_sensors: tuple[str, ...]
    forbidden_contacts: tuple[str, ...] = ()
    termination: Termination = field(default_factory=Termination)
    max_torque: float = 40.0
    density: float = 1000.0

    @property
    def n_morph_params(self) -> int:
        return len(self.morph_specs)

    @property
    def is_chain(self) -> bool:
        return self.kind.startswith("chain")

    @property
    def n_actuated(self) -> int:
        return sum(j.actuated for j in self.joints)

    def policy_shape(self) -> tuple[int, int, int]:
        """(n_inputs, n_hidden, n_outputs) of the controller for this body."""
        n_in = OBS_BODY_BLOCK + 2 * self.n_actuated + len(self.contact_sensors)
        return n_in, N_HIDDEN, self.n_actuated

    def element_index(self, name: str) -> int:
        for i, e in enumerate(self.elements):
            if e.name == name:
                return i
        raise BauplanError(f"{self.kind}: no element named {name!r}")

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise BauplanError(f"{self.kind}: no joint named {name!r}")

    def to_manifest(self) -> dict:
        def tgt(t: Target) -> dict:
            return {"kind": t.kind, "name": t.name, "property": t.property}

        return {
            "schema_version": 1,
            "kind": self.kind,
            "density": self.density,
            "max_torque": self.max_torque,
            "root_angle": self.root_angle,
            "torso": self.torso,
            "elements": [
                {"name": e.name, "length": e.length, "radius": e.radius, "parent": e.parent, "anchor": e.anchor}
                for e in self.elements
            ],
            "joints": [
                {
                    "name": j.name,
                    "parent": j.parent,
                    "child": j.child,
                    "rest_angle": j.rest_angle,
                    "lower": j.lower,
                    "upper": j.upper,
                    "actuated": j.actuated,
                }
                for j in self.joints
            ],
            "morph_specs": [
                {
                    "name": s.name,
                    "target": tgt(s.target),
                    "default": s.default_value,
                    "min_offset": s.min_offset,
                    "max_offset": s.max_offset,
                    "shared_with": [tgt(t) for t in s.shared_with],
                }
                for s in self.morph_specs
            ],
            "contact_sensors": list(self.contact_sensors),
            "forbidden_contacts": list(self.forbidden_contacts),
            "termination": {
                "max_pitch": self.termination.max_pitch,
                "min_torso_height": self.termination.min_torso_height,
            },
        }


@dataclass(frozen=True)
class PlanElement:
    name: str
    length: float
    radius: float
    mass: float
    parent: int
    anchor: float


@dataclass(frozen=True)
class PlanJoint:
    name: str
    parent: int
    child: int
    rest_angle: float
    lower: float
    upper: float
    actuated: bool
    max_torque: float


@dataclass(frozen=True)
class BodyPlanInstance:
    kind: str
    elements: tuple[PlanElement, ...]
    joints: tuple[PlanJoint, ...]
    root_angle: float
    torso: int
    contact_sensors: tuple[int, ...]
    forbidden_contacts: tuple[int, ...]
    # decoded value of every morphological spec, keyed by spec name
    morph_values: dict = field(default_factory=dict)
    morph_params: np.ndarray | None = None


@dataclass
class Genotype:
    """Flat parameter vector: ``values[:n_morph]`` morphology, the rest control."""

    values: np.ndarray
    n_morph: int
    n_ctrl: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n_morph + self.n_ctrl,):
            raise LayoutError(
                f"genotype of length {self.values.size} does not match layout ({self.n_morph}, {self.n_ctrl})"
            )


def split_genotype(g: Genotype) -> tuple[np.ndarray, np.ndarray]:
    return g.values[: g.n_morph].copy(), g.values[g.n_morph :].copy()


def join_genotype(morph, ctrl) -> Genotype:
    morph = np.asarray(morph, dtype=np.float64)
    ctrl = np.asarray(ctrl, dtype=np.float64)
    return Genotype(np.concatenate([morph, ctrl]), morph.size, ctrl.size)


def n_control_params(policy_shape: tuple[int, int, int]) -> int:
    n_in, n_hid, n_out = policy_shape
    return n_in * n_hid + n_hid * n_out + n_hid + n_out


def genotype_layout(template: BauplanTemplate, policy_shape=None) -> tuple[int, int]:
    shape = policy_shape if policy_shape is not None else template.policy_shape()
    return template.n_morph_params, n_control_params(shape)


# ---------------------------------------------------------------------------
# templates


def _target(d: dict) -> Target:
    if d["property"] not in PROPERTIES:
        raise BauplanError(f"unknown morphological property {d['property']!r}")
    return Target(d["kind"], d["name"], d["property"])


def template_from_manifest(data: dict) -> BauplanTemplate:
    if data.get("schema_version") != 1:
        raise BauplanError(f"unsupported manifest schema {data.get('schema_version')!r}")
    term = data.get("termination") or {}
    tpl = BauplanTemplate(
        kind=data["kind"],
        elements=tuple(
            ElementTemplate(e["name"], float(e["length"]), float(e["radius"]), e.get("parent"), e.get("anchor"))
            for e in data["elements"]
        ),
        joints=tuple(
            JointTemplate(
                j["name"],
                j["parent"],
                j["child"],
                float(j["rest_angle"]),
                float(j["lower"]),
                float(j["upper"]),
                bool(j.get("actuated", True)),
            )
            for j in data["joints"]
        ),
        morph_specs=tuple(
            MorphParamSpec(
                s["name"],
                _target(s["target"]),
                float(s["default"]),
                float(s["min_offset"]),
                float(s["max_offset"]),
                tuple(_target(t) for t in s.get("shared_with", [])),
            )
            for s in data["morph_specs"]
        ),
        root_angle=float(data["root_angle"]),
        torso=data["torso"],
        contact_sensors=tuple(data["contact_sensors"]),
        forbidden_contacts=tuple(data.get("forbidden_contacts", [])),
        termination=Termination(term.get("max_pitch"), term.get("min_torso_height")),
        max_torque=float(data.get("max_torque", 40.0)),
        density=float(data.get("density", 1000.0)),
    )
    _validate(tpl)
    return tpl


def load_manifest(path) -> BauplanTemplate:
    with open(path) as fh:
        return template_from_manifest(json.load(fh))


def _validate(tpl: BauplanTemplate) -> None:
    names = [e.name for e in tpl.elements]
    if len(set(names)) != len(names):
        raise BauplanError(f"{tpl.kind}: duplicate element names")
    if tpl.elements[0].parent is not None:
        raise BauplanError(f"{tpl.kind}: first element must be the root")
    if len(tpl.joints) != len(tpl.elements) - 1:
        raise BauplanError(f"{tpl.kind}: need exactly one joint per non-root element")
    for k, (e, j) in enumerate(zip(tpl.elements[1:], tpl.joints), start=1):
        if j.child != e.name or j.parent != e.parent:
            raise BauplanError(f"{tpl.kind}: joint {j.name} must connect {e.parent} -> {e.name}")
        if names.index(e.parent) >= k:
            raise BauplanError(f"{tpl.kind}: parent {e.parent} must precede {e.name}")
        if not (j.lower <= 0.0 <= j.upper):
            raise BauplanError(f"{tpl.kind}: joint {j.name} limits must bracket its rest angle")
    for s in tpl.morph_specs:
        if not s.min_offset < s.max_offset:
            raise BauplanError(f"{tpl.kind}: morphological parameter {s.name} has an empty range")
        for t in (s.target, *s.shared_with):
            if t.kind == "element":
                tpl.element_index(t.name)
                if t.property not in ("length", "radius"):
                    raise BauplanError(f"{tpl.kind}: morphological parameter {s.name} targets element property {t.property}")
                if s.default_value + s.min_offset <= 0.0:
                    raise BauplanError(f"{tpl.kind}: morphological parameter {s.name} can reach a non-positive size")
            elif t.kind == "joint":
                tpl.joint_index(t.name)
            else:
                raise BauplanError(f"{tpl.kind}: unknown target kind {t.kind!r}")
    for name in (*tpl.contact_sensors, *tpl.forbidden_contacts, tpl.torso):
        tpl.element_index(name)


def chain_template(n: int) -> BauplanTemplate:
    """``n`` identical capsules, each attached to the endpoint of the previous one."""
    if n < 2:
        raise BauplanError("a chain needs at least two elements")
    elements = [ElementTemplate("e0", CHAIN_LENGTH, CHAIN_RADIUS, None, None)]
    joints = []
    specs = []
    for i in range(1, n):
        elements.append(ElementTemplate(f"e{i}", CHAIN_LENGTH, CHAIN_RADIUS, f"e{i - 1}", 0.5))
        joints.append(JointTemplate(f"j{i}", f"e{i - 1}", f"e{i}", 0.0, -CHAIN_BASE_LIMIT, CHAIN_BASE_LIMIT))
    for e in elements:
        specs.append(
            MorphParamSpec(
                f"{e.name}_length", Target("element", e.name, "length"), CHAIN_LENGTH, -CHAIN_LENGTH_RANGE, CHAIN_LENGTH_RANGE
            )
        )
        specs.append(
            MorphParamSpec(
                f"{e.name}_radius", Target("element", e.name, "radius"), CHAIN_RADIUS, -CHAIN_RADIUS_RANGE, CHAIN_RADIUS_RANGE
            )
        )
    for j in joints:
        specs.append(
            MorphParamSpec(f"{j.name}_rest", Target("joint", j.name, "rest_angle"), 0.0, -CHAIN_REST_RANGE, CHAIN_REST_RANGE)
        )
        specs.append(
            MorphParamSpec(
                f"{j.name}_lower", Target("joint", j.name, "lower_limit_offset"), 0.0, -CHAIN_LIMIT_RANGE, CHAIN_LIMIT_RANGE
            )
        )
        specs.append(
            MorphParamSpec(
                f"{j.name}_upper", Target("joint", j.name, "upper_limit_offset"), 0.0, -CHAIN_LIMIT_RANGE, CHAIN_LIMIT_RANGE
            )
        )
    tpl = BauplanTemplate(
        kind=f"chain{n}",
        elements=tuple(elements),
        joints=tuple(joints),
        morph_specs=tuple(specs),
        root_angle=0.0,
        torso="e0",
        contact_sensors=tuple(e.name for e in elements),
    )
    _validate(tpl)
    return tpl


_CACHE: dict[str, BauplanTemplate] = {}

KINDS = ("walker2d", "halfcheetah", "chain7", "chain13")


def template(kind: str) -> BauplanTemplate:
    """Canonical template for ``walker2d``, ``halfcheetah`` or ``chainN``."""
    kind = kind.lower().replace("-", "").replace("_", "")
    if kind in _CACHE:
        return _CACHE[kind]
    m = re.fullmatch(r"chain\(?(\d+)\)?", kind)
    if m:
        tpl = chain_template(int(m.group(1)))
    elif kind in ("walker2d", "halfcheetah"):
        ref = resources.files("coevo") / "manifests" / f"{kind}.json"
        tpl = template_from_manifest(json.loads(ref.read_text()))
    else:
        raise BauplanError(f"unknown bauplan kind {kind!r}")
    _CACHE[tpl.kind] = tpl
    return tpl


# ---------------------------------------------------------------------------
# decoding


def decode(tpl: BauplanTemplate, morph_params) -> BodyPlanInstance:
    """Apply a morphological parameter vector to a template.

    An empty vector is accepted for any template and yields the default
    body (the fixed-morphology condition).
    """
    p = np.asarray(morph_params, dtype=np.float64).ravel()
    if p.size == 0:
        p = np.zeros(tpl.n_morph_params)
    if p.size != tpl.n_morph_params:
        raise LayoutError(f"{tpl.kind} expects {tpl.n_morph_params} morphological parameters, got {p.size}")

    length = {e.name: e.length for e in tpl.elements}
    radius = {e.name: e.radius for e in tpl.elements}
    rest = {j.name: j.rest_angle for j in tpl.joints}
    lower_off = {j.name: 0.0 for j in tpl.joints}
    upper_off = {j.name: 0.0 for j in tpl.joints}
    table = {"length": length, "radius": radius, "rest_angle": rest,
             "lower_limit_offset": lower_off, "upper_limit_offset": upper_off}

    values = {}
    for spec, x in zip(tpl.morph_specs, p):
        v = spec.decode(float(x))
        values[spec.name] = v
        for t in (spec.target, *spec.shared_with):
            table[t.property][t.name] = v

    index = {e.name: i for i, e in enumerate(tpl.elements)}
    elements = []
    for e in tpl.elements:
        L, r = length[e.name], radius[e.name]
        elements.append(
            PlanElement(
                name=e.name,
                length=L,
                radius=r,
                mass=tpl.density * math.pi * r * r * L,
                parent=-1 if e.parent is None else index[e.parent],
                anchor=0.0 if e.anchor is None else float(e.anchor),
            )
        )
    joints = []
    for j in tpl.joints:
        r0 = rest[j.name]
        if j.lower == j.upper == 0.0:
            lo = hi = 0.0
        else:
            # keep the rest angle inside the decoded limits
            lo = min(max(j.lower + lower_off[j.name], -math.pi), 0.0)
            hi = max(min(j.upper + upper_off[j.name], math.pi), 0.0)
            # opposing offsets may close the joint; reopen it below the upper limit
            lo = min(lo, hi - MIN_JOINT_SPAN)
        joints.append(
            PlanJoint(
                name=j.name,
                parent=index[j.parent],
                child=index[j.child],
                rest_angle=r0,
                lower=r0 + lo,
                upper=r0 + hi,
                actuated=j.actuated,
                max_torque=tpl.max_torque if j.actuated else 0.0,
            )
        )
    return BodyPlanInstance(
        kind=tpl.kind,
        elements=tuple(elements),
        joints=tuple(joints),
        root_angle=tpl.root_angle,
        torso=index[tpl.torso],
        contact_sensors=tuple(index[n] for n in tpl.contact_sensors),
        forbidden_contacts=tuple(index[n] for n in tpl.forbidden_contacts),
        morph_values=values,
        morph_params=p.copy(),
    )


def write_manifest(tpl: BauplanTemplate, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(tpl.to_manifest(), indent=2))
    return path
