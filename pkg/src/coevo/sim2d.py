"""Planar articulated rigid-body simulator.

Bodies are trees of capsule links joined by hinge joints, moving in the
x-z plane (x forward, z up, angles counter-clockwise). The state is kept in
reduced coordinates::

    q = [x_ref, z_ref, root_angle, theta_dof_0, theta_dof_1, ...]

where ``(x_ref, z_ref)`` is the root reference point (the root centre of
mass for a floating base, or the pin for a pinned base) and ``theta`` are
the relative angles (child angle minus parent angle) of the non-locked
joints.  Because link poses are rebuilt from ``q`` by forward kinematics,
joint anchors of parent and child always coincide.

Each substep is a semi-implicit Euler step: smooth dynamics from the
joint-space mass matrix, then an iterative impulse solver (projected
Gauss-Seidel) for ground contact with Coulomb friction and for joint
limits, then position integration and a final projection of joint angles
into their limits.

The numerical kernels are compiled with numba; the episode runner drives
them directly without going through the Python wrappers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

__all__ = [
    "PhysicsConfig",
    "RigidLink",
    "HingeJoint",
    "ArticulatedModel",
    "WorldState",
    "StepReport",
    "ConfigurationError",
    "InvalidPlanError",
    "SimulationDiverged",
    "build_model",
    "build_world",
    "step_world",
    "link_contacts",
    "world_energy",
]


class ConfigurationError(ValueError):
    pass


class InvalidPlanError(ValueError):
    pass


class SimulationDiverged(RuntimeError):
    def __init__(self, step: int, time: float):
        super().__init__(f"simulation diverged at substep {step} (t={time:.6f} s)")
        self.step = step
        self.time = time


@dataclass(frozen=True)
class PhysicsConfig:
    gravity: float = 9.81
    friction: float = 0.9
    baumgarte: float = 0.2
    iterations: int = 20
    substep_dt: float = 1.0 / 240.0
    n_substeps: int = 4
    # allowed resting penetration before positional correction kicks in
    slop: float = 0.002
    contact_tolerance: float = 0.005
    speculative_margin: float = 0.05
    limit_margin: float = 0.05
    # distance (rad) from a limit at which a joint counts as saturated
    limit_tolerance: float = 1e-3
    # viscous joint friction (N·m·s/rad) and rotor inertia added to each joint (kg·m²)
    joint_damping: float = 0.1
    joint_armature: float = 0.01
    # clamp (rad/s) on the root spin and every joint rate
    max_angular_speed: float = 100.0

    def packed(self) -> np.ndarray:
        return np.array(
            [
                self.gravity,
                self.friction,
                self.baumgarte,
                float(self.iterations),
                self.slop,
                self.contact_tolerance,
                self.speculative_margin,
                self.limit_margin,
                self.limit_tolerance,
                self.joint_damping,
                self.joint_armature,
                self.max_angular_speed,
            ],
            dtype=np.float64,
        )


# indices into PhysicsConfig.packed()
_G, _MU, _BETA, _ITERS, _SLOP, _CTOL, _CMARGIN, _LMARGIN, _LTOL, _DAMP, _ARM, _VMAX = range(12)


@dataclass
class RigidLink:
    length: float
    radius: float
    mass: float
    moment_of_inertia: float
    pose: tuple[float, float, float]
    velocity: tuple[float, float, float]


@dataclass(frozen=True)
class HingeJoint:
    parent_link: int
    child_link: int
    anchor_on_parent: tuple[float, float]
    anchor_on_child: tuple[float, float]
    rest_angle: float
    lower_limit: float
    upper_limit: float
    actuated: bool
    max_torque: float


@dataclass
class StepReport:
    applied_torques: np.ndarray
    limit_hit: np.ndarray
    max_link_speed: float
    max_joint_speed: float
    penetration_depth: float
    # linear speed of the fastest joint anchor point
    max_anchor_speed: float = 0.0


@dataclass
class ArticulatedModel:
    """Static description of an articulated body, packed for the kernels.

    Link ``i > 0`` is the child of joint ``i - 1``; parents always precede
    their children.
    """

    links: list[RigidLink]
    joints: list[HingeJoint]
    parent: np.ndarray
    length: np.ndarray
    radius: np.ndarray
    mass: np.ndarray
    inertia: np.ndarray
    anchor_p: np.ndarray
    anchor_c: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    dof: np.ndarray
    actuated: np.ndarray
    max_torque: np.ndarray
    desc: np.ndarray
    root_ref: np.ndarray
    active: np.ndarray
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)

    @property
    def n_links(self) -> int:
        return len(self.length)

    @property
    def n_joints(self) -> int:
        return len(self.lower)

    @property
    def n_coords(self) -> int:
        return 3 + int((self.dof >= 0).sum())

    @property
    def actuated_joints(self) -> np.ndarray:
        return np.flatnonzero(self.actuated)

    def kernel_args(self) -> tuple:
        return (
            self.parent,
            self.length,
            self.radius,
            self.mass,
            self.inertia,
            self.anchor_p,
            self.anchor_c,
            self.lower,
            self.upper,
            self.dof,
            self.actuated,
            self.max_torque,
            self.desc,
            self.root_ref,
            self.active,
        )


@dataclass
class WorldState:
    model: ArticulatedModel
    q: np.ndarray
    qd: np.ndarray
    time: float = 0.0
    contact_flags: np.ndarray | None = None
    # generalized momentum carried by the integrator; derived from qd if unset
    p: np.ndarray | None = None

    @property
    def gravity(self) -> float:
        return self.model.physics.gravity

    @property
    def joints(self) -> list[HingeJoint]:
        return self.model.joints

    @property
    def joint_angles(self) -> np.ndarray:
        return _joint_values(self.model, self.q, locked_value=True)

    @property
    def joint_speeds(self) -> np.ndarray:
        return _joint_values(self.model, self.qd, locked_value=False)

    @property
    def links(self) -> list[RigidLink]:
        pos, ang, vel, omg = link_kinematics(self)
        out = []
        for i, link in enumerate(self.model.links):
            out.append(
                replace(
                    link,
                    pose=(float(pos[i, 0]), float(pos[i, 1]), float(ang[i])),
                    velocity=(float(vel[i, 0]), float(vel[i, 1]), float(omg[i])),
                )
            )
        return out

    def set_velocities(self, qd) -> None:
        """Overwrite generalized velocities and resynchronize the momentum."""
        self.qd = np.array(qd, dtype=np.float64)
        self.p = momentum(self.model.kernel_args(), self.q, self.qd, self.model.physics.joint_armature)

    def copy(self) -> "WorldState":
        flags = None if self.contact_flags is None else self.contact_flags.copy()
        p = None if self.p is None else self.p.copy()
        return WorldState(self.model, self.q.copy(), self.qd.copy(), self.time, flags, p)


def _joint_values(model: ArticulatedModel, vec: np.ndarray, locked_value: bool) -> np.ndarray:
    out = np.empty(model.n_joints)
    for j in range(model.n_joints):
        d = model.dof[j]
        if d >= 0:
            out[j] = vec[3 + d]
        else:
            out[j] = model.lower[j] if locked_value else 0.0
    return out


def cylinder_inertia(mass: float, radius: float, length: float) -> float:
    """Solid cylinder about its centre, axis perpendicular to the cylinder."""
    return mass * (3.0 * radius * radius + length * length) / 12.0


def build_model(plan, physics: PhysicsConfig | None = None, pinned: bool = False) -> ArticulatedModel:
    """Pack a decoded body plan into kernel arrays.

    ``plan`` needs ``elements`` (with ``length``, ``radius``, ``mass``,
    ``parent``, ``anchor``) and ``joints`` (with ``parent``, ``child``,
    ``rest_angle``, ``lower``, ``upper``, ``actuated``, ``max_torque``).
    ``anchor`` is the attachment point on the parent as a fraction of its
    length along the link axis; children attach by their proximal end.
    """
    physics = physics or PhysicsConfig()
    elements = list(plan.elements)
    joints = list(plan.joints)
    nl = len(elements)
    if nl == 0:
        raise InvalidPlanError("plan has no elements")
    if len(joints) != nl - 1:
        raise InvalidPlanError(f"tree of {nl} links needs {nl - 1} joints, got {len(joints)}")

    links = []
    for e in elements:
        if not (e.length > 0 and e.radius > 0 and e.mass > 0):
            raise InvalidPlanError(f"element {getattr(e, 'name', '?')} has non-positive geometry or mass")
        links.append(
            RigidLink(
                length=float(e.length),
                radius=float(e.radius),
                mass=float(e.mass),
                moment_of_inertia=cylinder_inertia(e.mass, e.radius, e.length),
                pose=(0.0, 0.0, 0.0),
                velocity=(0.0, 0.0, 0.0),
            )
        )

    parent = np.full(nl, -1, dtype=np.int64)
    hinge = []
    dof = np.full(nl - 1, -1, dtype=np.int64)
    n_dof = 0
    for j, jt in enumerate(joints):
        if jt.child != j + 1:
            raise InvalidPlanError(f"joint {j} must drive link {j + 1}, drives {jt.child}")
        if not (0 <= jt.parent < jt.child):
            raise InvalidPlanError(f"joint {j}: parent {jt.parent} must precede child {jt.child}")
        if jt.lower > jt.upper:
            raise InvalidPlanError(f"joint {j}: lower limit {jt.lower} > upper limit {jt.upper}")
        if not (jt.lower - 1e-12 <= jt.rest_angle <= jt.upper + 1e-12):
            raise InvalidPlanError(f"joint {j}: rest angle outside limits")
        parent[jt.child] = jt.parent
        lp = elements[jt.parent].length
        lc = elements[jt.child].length
        anchor_frac = elements[jt.child].anchor
        ap = (anchor_frac * lp, 0.0)
        ac = (-0.5 * lc, 0.0)
        locked = jt.lower == jt.upper
        if not locked:
            dof[j] = n_dof
            n_dof += 1
        elif jt.actuated:
            raise InvalidPlanError(f"joint {j}: zero-range joints cannot be actuated")
        hinge.append(
            HingeJoint(
                parent_link=int(jt.parent),
                child_link=int(jt.child),
                anchor_on_parent=ap,
                anchor_on_child=ac,
                rest_angle=float(jt.rest_angle),
                lower_limit=float(jt.lower),
                upper_limit=float(jt.upper),
                actuated=bool(jt.actuated),
                max_torque=float(jt.max_torque) if jt.actuated else 0.0,
            )
        )

    desc = np.zeros((nl, max(nl - 1, 1)), dtype=np.bool_)
    for i in range(1, nl):
        k = i
        while k > 0:
            desc[i, k - 1] = True
            k = parent[k]

    n = 3 + n_dof
    active = np.ones(n, dtype=np.bool_)
    root_ref = np.zeros(2)
    if pinned:
        active[0] = active[1] = False
        root_ref[0] = -0.5 * links[0].length

    return ArticulatedModel(
        links=links,
        joints=hinge,
        parent=parent,
        length=np.array([l.length for l in links]),
        radius=np.array([l.radius for l in links]),
        mass=np.array([l.mass for l in links]),
        inertia=np.array([l.moment_of_inertia for l in links]),
        anchor_p=np.array([h.anchor_on_parent for h in hinge], dtype=np.float64).reshape(-1, 2),
        anchor_c=np.array([h.anchor_on_child for h in hinge], dtype=np.float64).reshape(-1, 2),
        lower=np.array([h.lower_limit for h in hinge], dtype=np.float64),
        upper=np.array([h.upper_limit for h in hinge], dtype=np.float64),
        dof=dof,
        actuated=np.array([h.actuated for h in hinge], dtype=np.bool_),
        max_torque=np.array([h.max_torque for h in hinge], dtype=np.float64),
        desc=desc,
        root_ref=root_ref,
        active=active,
        physics=physics,
    )


def build_world(
    plan,
    joint_perturbations=None,
    initial_height: float = 0.1,
    physics: PhysicsConfig | None = None,
    pin: tuple[float, float] | None = None,
) -> WorldState:
    """Assemble a body at rest with perturbed joint angles.

    One perturbation per actuated joint. Perturbed angles are clipped into
    the joint limits. For a floating base the body is translated so the
    root sits at x = 0 and its lowest surface point is ``initial_height``
    above the ground. With ``pin`` the proximal end of the root link is
    fixed at that world point and may only rotate.
    """
    model = build_model(plan, physics, pinned=pin is not None)
    n_act = int(model.actuated.sum())
    pert = np.zeros(n_act) if joint_perturbations is None else np.asarray(joint_perturbations, dtype=np.float64)
    if pert.shape != (n_act,):
        raise ConfigurationError(f"expected {n_act} joint perturbations, got {pert.size}")

    q = np.zeros(model.n_coords)
    q[2] = float(plan.root_angle)
    act = model.actuated_joints
    for j, jt in enumerate(model.joints):
        d = model.dof[j]
        if d < 0:
            continue
        angle = jt.rest_angle
        hit = np.flatnonzero(act == j)
        if hit.size:
            angle += pert[hit[0]]
        q[3 + d] = min(max(angle, jt.lower_limit), jt.upper_limit)

    qd = np.zeros_like(q)
    if pin is not None:
        q[0], q[1] = pin
    else:
        pos, ang, _, _ = _kin_arrays(model, q, qd)
        lowest = _lowest_point(model, pos, ang)
        q[0] = 0.0
        q[1] = initial_height - lowest
    world = WorldState(model, q, qd, 0.0, p=np.zeros_like(q))
    world.contact_flags = link_contacts(world)
    return world


def step_world(world: WorldState, torque_commands, control_dt: float = 1.0 / 60.0) -> tuple[WorldState, StepReport]:
    """Advance one control step; returns a new state and a report.

    ``torque_commands`` has one entry per actuated joint and is clipped to
    each motor's ``max_torque``.
    """
    if control_dt <= 0:
        raise ConfigurationError("control_dt must be positive")
    model = world.model
    act = model.actuated_joints
    cmd = np.asarray(torque_commands, dtype=np.float64)
    if cmd.shape != (len(act),):
        raise ConfigurationError(f"expected {len(act)} torque commands, got {cmd.size}")
    tau = np.zeros(model.n_joints)
    tau[act] = np.clip(cmd, -model.max_torque[act], model.max_torque[act])

    new = world.copy()
    if new.p is None:
        new.p = momentum(model.kernel_args(), new.q, new.qd, model.physics.joint_armature)
    phys = model.physics
    h = control_dt / phys.n_substeps
    report = np.zeros(4)
    applied = np.zeros(model.n_joints)
    limit_hit = np.zeros(model.n_joints, dtype=np.bool_)
    flags = np.zeros(model.n_links, dtype=np.bool_)
    ok = control_step(
        model.kernel_args(), phys.packed(), new.q, new.qd, new.p, tau, h, phys.n_substeps, applied, limit_hit, flags, report
    )
    if ok < 0:
        substep = int(round(world.time / h)) + (-ok)
        raise SimulationDiverged(substep, world.time + (-ok) * h)
    new.time = world.time + control_dt
    new.contact_flags = flags
    return new, StepReport(
        applied_torques=applied[act],
        limit_hit=limit_hit[act],
        max_link_speed=float(report[0]),
        max_joint_speed=float(report[1]),
        penetration_depth=float(report[2]),
        max_anchor_speed=float(report[3]),
    )


def link_contacts(world: WorldState) -> np.ndarray:
    model = world.model
    pos, ang, _, _ = _kin_arrays(model, world.q, world.qd)
    flags = np.zeros(model.n_links, dtype=np.bool_)
    _contact_flags(model.length, model.radius, pos, ang, model.physics.contact_tolerance, flags)
    return flags


def world_energy(world: WorldState) -> float:
    """Kinetic plus gravitational potential energy (z = 0 reference)."""
    model = world.model
    pos, _, vel, omg = _kin_arrays(model, world.q, world.qd)
    return float(_energy(model.mass, model.inertia, pos, vel, omg, model.physics.gravity))


def link_kinematics(world: WorldState):
    """Per-link centre positions, angles, linear and angular velocities."""
    return _kin_arrays(world.model, world.q, world.qd)


def _kin_arrays(model: ArticulatedModel, q, qd):
    nl, nj = model.n_links, model.n_joints
    pos = np.zeros((nl, 2))
    ang = np.zeros(nl)
    vel = np.zeros((nl, 2))
    omg = np.zeros(nl)
    vanc = np.zeros((max(nj, 1), 2))
    anc = np.zeros((max(nj, 1), 2))
    th = np.zeros(max(nj, 1))
    thd = np.zeros(max(nj, 1))
    kinematics(model.kernel_args(), q, qd, pos, ang, vel, omg, vanc, anc, th, thd)
    return pos, ang, vel, omg


def _lowest_point(model: ArticulatedModel, pos, ang) -> float:
    lowest = np.inf
    for i in range(model.n_links):
        half = 0.5 * model.length[i] * math.sin(ang[i])
        lowest = min(lowest, pos[i, 1] - abs(half) - model.radius[i])
    return lowest


# ---------------------------------------------------------------------------
# kernels

# fixed-point sweeps for the implicit velocity update
_FIXED_POINT_SWEEPS = 3


@njit(cache=True)
def kinematics(model, q, qd, pos, ang, vel, omg, vanc, anc, theta, thetad):
    """Forward kinematics: link centres, angles, velocities and joint anchors."""
    parent, length, radius, mass, inertia, anchor_p, anchor_c, lower, upper, dof, actuated, max_torque, desc, root_ref, active = model
    nl = length.shape[0]
    phi0 = q[2]
    w0 = qd[2]
    c = math.cos(phi0)
    s = math.sin(phi0)
    dx = c * root_ref[0] - s * root_ref[1]
    dz = s * root_ref[0] + c * root_ref[1]
    pos[0, 0] = q[0] - dx
    pos[0, 1] = q[1] - dz
    vel[0, 0] = qd[0] + w0 * dz
    vel[0, 1] = qd[1] - w0 * dx
    ang[0] = phi0
    omg[0] = w0
    for j in range(nl - 1):
        i = j + 1
        k = parent[i]
        if dof[j] >= 0:
            th = q[3 + dof[j]]
            thd = qd[3 + dof[j]]
        else:
            th = lower[j]
            thd = 0.0
        theta[j] = th
        thetad[j] = thd
        ang[i] = ang[k] + th
        omg[i] = omg[k] + thd
        ck = math.cos(ang[k])
        sk = math.sin(ang[k])
        rpx = ck * anchor_p[j, 0] - sk * anchor_p[j, 1]
        rpz = sk * anchor_p[j, 0] + ck * anchor_p[j, 1]
        ci = math.cos(ang[i])
        si = math.sin(ang[i])
        rcx = ci * anchor_c[j, 0] - si * anchor_c[j, 1]
        rcz = si * anchor_c[j, 0] + ci * anchor_c[j, 1]
        anc[j, 0] = pos[k, 0] + rpx
        anc[j, 1] = pos[k, 1] + rpz
        pos[i, 0] = anc[j, 0] - rcx
        pos[i, 1] = anc[j, 1] - rcz
        vanc[j, 0] = vel[k, 0] - omg[k] * rpz
        vanc[j, 1] = vel[k, 1] + omg[k] * rpx
        vel[i, 0] = vanc[j, 0] + omg[i] * rcz
        vel[i, 1] = vanc[j, 1] - omg[i] * rcx


@njit(cache=True)
def _point_jacobian(model, q, anc, link, px, pz, jx, jz, jw):
    """Fill generalized-coordinate Jacobian rows of a point rigidly on ``link``."""
    parent, length, radius, mass, inertia, anchor_p, anchor_c, lower, upper, dof, actuated, max_torque, desc, root_ref, active = model
    n = q.shape[0]
    for a in range(n):
        jx[a] = 0.0
        jz[a] = 0.0
        jw[a] = 0.0
    jx[0] = 1.0
    jz[1] = 1.0
    jx[2] = -(pz - q[1])
    jz[2] = px - q[0]
    jw[2] = 1.0
    for j in range(anc.shape[0]):
        if j >= length.shape[0] - 1:
            break
        d = dof[j]
        if d >= 0 and desc[link, j]:
            jx[3 + d] = -(pz - anc[j, 1])
            jz[3 + d] = px - anc[j, 0]
            jw[3 + d] = 1.0
    for a in range(n):
        if not active[a]:
            jx[a] = 0.0
            jz[a] = 0.0
            jw[a] = 0.0


@njit(cache=True)
def _cholesky(M, n):
    for j in range(n):
        s = M[j, j]
        for k in range(j):
            s -= M[j, k] * M[j, k]
        d = math.sqrt(s)
        M[j, j] = d
        for i in range(j + 1, n):
            s = M[i, j]
            for k in range(j):
                s -= M[i, k] * M[j, k]
            M[i, j] = s / d


@njit(cache=True)
def _chol_solve(Lm, b, x, n):
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= Lm[i, k] * x[k]
        x[i] = s / Lm[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s -= Lm[k, i] * x[k]
        x[i] = s / Lm[i, i]


@njit(cache=True)
def _contact_flags(length, radius, pos, ang, tol, flags):
    for i in range(length.shape[0]):
        hz = 0.5 * length[i] * math.sin(ang[i])
        low = pos[i, 1] - abs(hz) - radius[i]
        flags[i] = low <= tol


@njit(cache=True)
def _energy(mass, inertia, pos, vel, omg, g):
    e = 0.0
    for i in range(mass.shape[0]):
        v2 = vel[i, 0] * vel[i, 0] + vel[i, 1] * vel[i, 1]
        e += 0.5 * mass[i] * v2 + 0.5 * inertia[i] * omg[i] * omg[i] + mass[i] * g * pos[i, 1]
    return e


@njit(cache=True)
def _generalized_forces(model, q, v, tau, damp, g, ws, f):
    """Gravity, motor torques, joint damping and dT/dq evaluated at velocity ``v``."""
    parent, length, radius, mass, inertia, anchor_p, anchor_c, lower, upper, dof, actuated, max_torque, desc, root_ref, active = model
    pos, ang, vel, omg, vanc, anc, theta, thetad = ws[0], ws[1], ws[2], ws[3], ws[4], ws[5], ws[6], ws[7]
    jx, jz, jw = ws[11], ws[12], ws[13]
    kinematics(model, q, v, pos, ang, vel, omg, vanc, anc, theta, thetad)
    n = q.shape[0]
    nl = length.shape[0]
    for a in range(n):
        f[a] = 0.0
    for i in range(nl):
        m = mass[i]
        _point_jacobian(model, q, anc, i, pos[i, 0], pos[i, 1], jx, jz, jw)
        for a in range(n):
            f[a] -= m * g * jz[a]
        # v . perp(v - v_pivot) = vx * vpz - vz * vpx
        vx = vel[i, 0]
        vz = vel[i, 1]
        f[2] += m * (vx * v[1] - vz * v[0])
        for j in range(nl - 1):
            d = dof[j]
            if d >= 0 and desc[i, j]:
                f[3 + d] += m * (vx * vanc[j, 1] - vz * vanc[j, 0])
    for j in range(nl - 1):
        d = dof[j]
        if d >= 0:
            f[3 + d] += tau[j] - damp * v[3 + d]
    for a in range(n):
        if not active[a]:
            f[a] = 0.0


@njit(cache=True)
def _substep(model, phys, q, qd, p, tau, h, applied, limit_hit, ws):
    parent, length, radius, mass, inertia, anchor_p, anchor_c, lower, upper, dof, actuated, max_torque, desc, root_ref, active = model
    pos, ang, vel, omg, vanc, anc, theta, thetad = ws[0], ws[1], ws[2], ws[3], ws[4], ws[5], ws[6], ws[7]
    M, f, tmp, jx, jz, jw = ws[8], ws[9], ws[10], ws[11], ws[12], ws[13]
    J, W, A, lam, tgt, kind, partner, rhs, taueff = ws[14], ws[15], ws[16], ws[17], ws[18], ws[19], ws[20], ws[21], ws[22]
    n = q.shape[0]
    nl = length.shape[0]
    nj = nl - 1
    g = phys[_G]
    mu = phys[_MU]
    beta = phys[_BETA]
    iters = int(phys[_ITERS])
    slop = phys[_SLOP]
    cmargin = phys[_CMARGIN]
    lmargin = phys[_LMARGIN]
    ltol = phys[_LTOL]
    damp = phys[_DAMP]
    arm = phys[_ARM]
    vmax = phys[_VMAX]

    kinematics(model, q, qd, pos, ang, vel, omg, vanc, anc, theta, thetad)

    for j in range(nj):
        t = tau[j]
        if dof[j] < 0 or not actuated[j]:
            t = 0.0
        elif (theta[j] >= upper[j] - ltol and t > 0.0) or (theta[j] <= lower[j] + ltol and t < 0.0):
            t = 0.0
            limit_hit[j] = True
        taueff[j] = t
        applied[j] += t

    for a in range(n):
        for b in range(n):
            M[a, b] = 0.0
    for i in range(nl):
        _point_jacobian(model, q, anc, i, pos[i, 0], pos[i, 1], jx, jz, jw)
        m = mass[i]
        for a in range(n):
            if jx[a] == 0.0 and jz[a] == 0.0 and jw[a] == 0.0:
                continue
            for b in range(n):
                M[a, b] += m * (jx[a] * jx[b] + jz[a] * jz[b]) + inertia[i] * jw[a] * jw[b]
    for a in range(3, n):
        M[a, a] += arm
    for a in range(n):
        if not active[a]:
            for b in range(n):
                M[a, b] = 0.0
                M[b, a] = 0.0
            M[a, a] = 1.0
    _cholesky(M, n)

    # symplectic Euler: M(q) v = p + h f(q, v), solved by fixed-point sweeps.
    # The first sweep is the explicit estimate; later sweeps are kept only
    # while the iteration contracts (it stops doing so at very high spin).
    fp = ws[23]
    first = 0.0
    for sweep in range(_FIXED_POINT_SWEEPS):
        for a in range(n):
            fp[a] = qd[a]
        _generalized_forces(model, q, qd, taueff, damp, g, ws, f)
        for a in range(n):
            rhs[a] = p[a] + h * f[a]
        _chol_solve(M, rhs, qd, n)
        diff = 0.0
        for a in range(n):
            d = abs(qd[a] - fp[a])
            if d > diff:
                diff = d
        if sweep == 0:
            first = diff
            for a in range(n):
                tmp[a] = qd[a]
        elif not diff <= first:
            for a in range(n):
                qd[a] = tmp[a]
            break
    for a in range(n):
        if not active[a]:
            qd[a] = 0.0
        elif a >= 2:
            if qd[a] > vmax:
                qd[a] = vmax
            elif qd[a] < -vmax:
                qd[a] = -vmax

    # constraint rows: kind 0 = unilateral (contact normal / limit), 1 = friction
    nr = 0
    for i in range(nl):
        c = math.cos(ang[i])
        s = math.sin(ang[i])
        for sign in (-1.0, 1.0):
            ex = pos[i, 0] + sign * 0.5 * length[i] * c
            ez = pos[i, 1] + sign * 0.5 * length[i] * s
            gap = ez - radius[i]
            if gap >= cmargin:
                continue
            _point_jacobian(model, q, anc, i, ex, ez - radius[i], jx, jz, jw)
            for a in range(n):
                J[nr, a] = jz[a]
                J[nr + 1, a] = jx[a]
            if gap > 0.0:
                tgt[nr] = -gap / h
            else:
                pen = -gap - slop
                tgt[nr] = beta * pen / h if pen > 0.0 else 0.0
            kind[nr] = 0
            kind[nr + 1] = 1
            partner[nr + 1] = nr
            tgt[nr + 1] = 0.0
            nr += 2
    for j in range(nj):
        d = dof[j]
        if d < 0:
            continue
        for side in (-1.0, 1.0):
            gap = theta[j] - lower[j] if side < 0 else upper[j] - theta[j]
            if gap >= lmargin:
                continue
            for a in range(n):
                J[nr, a] = 0.0
            J[nr, 3 + d] = -side
            tgt[nr] = -gap / h if gap > 0.0 else -beta * gap / h
            kind[nr] = 0
            nr += 1

    for r in range(nr):
        _chol_solve(M, J[r], tmp, n)
        dot = 0.0
        for a in range(n):
            W[r, a] = tmp[a]
            dot += J[r, a] * tmp[a]
        A[r] = dot if dot > 1e-12 else 1e-12
        lam[r] = 0.0
    for it in range(iters):
        for r in range(nr):
            v = 0.0
            for a in range(n):
                v += J[r, a] * qd[a]
            old = lam[r]
            if kind[r] == 0:
                new = old + (tgt[r] - v) / A[r]
                if new < 0.0:
                    new = 0.0
            else:
                bound = mu * lam[partner[r]]
                new = old - v / A[r]
                if new > bound:
                    new = bound
                elif new < -bound:
                    new = -bound
            dl = new - old
            if dl != 0.0:
                lam[r] = new
                for a in range(n):
                    qd[a] += W[r, a] * dl

    for a in range(n):
        if active[a]:
            q[a] += h * qd[a]
    for j in range(nj):
        d = dof[j]
        if d < 0:
            continue
        k = 3 + d
        if q[k] < lower[j]:
            q[k] = lower[j]
            if qd[k] < 0.0:
                qd[k] = 0.0
        elif q[k] > upper[j]:
            q[k] = upper[j]
            if qd[k] > 0.0:
                qd[k] = 0.0

    # p = M v with M = L L^T from the factorization
    for a in range(n):
        s = 0.0
        for k in range(a, n):
            s += M[k, a] * qd[k]
        tmp[a] = s
    for a in range(n):
        s = 0.0
        for k in range(a + 1):
            s += M[a, k] * tmp[k]
        p[a] = s


@njit(cache=True)
def make_workspace(n_links, n_coords):
    nj = max(n_links - 1, 1)
    rmax = 4 * n_links + 2 * nj
    return (
        np.zeros((n_links, 2)),
        np.zeros(n_links),
        np.zeros((n_links, 2)),
        np.zeros(n_links),
        np.zeros((nj, 2)),
        np.zeros((nj, 2)),
        np.zeros(nj),
        np.zeros(nj),
        np.zeros((n_coords, n_coords)),
        np.zeros(n_coords),
        np.zeros(n_coords),
        np.zeros(n_coords),
        np.zeros(n_coords),
        np.zeros(n_coords),
        np.zeros((rmax, n_coords)),
        np.zeros((rmax, n_coords)),
        np.zeros(rmax),
        np.zeros(rmax),
        np.zeros(rmax),
        np.zeros(rmax, dtype=np.int64),
        np.zeros(rmax, dtype=np.int64),
        np.zeros(n_coords),
        np.zeros(nj),
        np.zeros(n_coords),
    )


@njit(cache=True)
def control_step_ws(model, phys, q, qd, p, tau, h, n_sub, applied, limit_hit, flags, report, ws):
    """Run ``n_sub`` substeps in place.

    Fills ``applied`` (mean applied torque per joint), ``limit_hit``,
    contact ``flags`` and ``report`` = [max link speed, max joint speed,
    penetration depth, max anchor speed]. Returns 1 on success or ``-k`` when the state
    became non-finite during substep ``k``.
    """
    parent, length, radius, mass, inertia, anchor_p, anchor_c, lower, upper, dof, actuated, max_torque, desc, root_ref, active = model
    pos, ang, vel, omg, vanc, anc, theta, thetad = ws[0], ws[1], ws[2], ws[3], ws[4], ws[5], ws[6], ws[7]
    nj = length.shape[0] - 1
    for j in range(nj):
        applied[j] = 0.0
        limit_hit[j] = False
    for k in range(n_sub):
        _substep(model, phys, q, qd, p, tau, h, applied, limit_hit, ws)
        for a in range(q.shape[0]):
            if not (math.isfinite(q[a]) and math.isfinite(qd[a])):
                return -(k + 1)
    for j in range(nj):
        applied[j] /= n_sub
    kinematics(model, q, qd, pos, ang, vel, omg, vanc, anc, theta, thetad)
    vmax = 0.0
    pen = 0.0
    for i in range(length.shape[0]):
        v = math.sqrt(vel[i, 0] * vel[i, 0] + vel[i, 1] * vel[i, 1])
        if v > vmax:
            vmax = v
        hz = 0.5 * length[i] * math.sin(ang[i])
        low = pos[i, 1] - abs(hz) - radius[i]
        if -low > pen:
            pen = -low
    wmax = 0.0
    amax = 0.0
    for j in range(nj):
        w = abs(thetad[j])
        if w > wmax:
            wmax = w
        a = math.sqrt(vanc[j, 0] * vanc[j, 0] + vanc[j, 1] * vanc[j, 1])
        if a > amax:
            amax = a
    _contact_flags(length, radius, pos, ang, phys[_CTOL], flags)
    report[0] = vmax
    report[1] = wmax
    report[2] = pen
    report[3] = amax
    return 1


@njit(cache=True)
def control_step(model, phys, q, qd, p, tau, h, n_sub, applied, limit_hit, flags, report):
    ws = make_workspace(model[1].shape[0], q.shape[0])
    return control_step_ws(model, phys, q, qd, p, tau, h, n_sub, applied, limit_hit, flags, report, ws)


@njit(cache=True)
def momentum(model, q, qd, armature):
    """Generalized momentum M(q) qd, including joint rotor inertia."""
    parent, length, radius, mass, inertia, anchor_p, anchor_c, lower, upper, dof, actuated, max_torque, desc, root_ref, active = model
    ws = make_workspace(length.shape[0], q.shape[0])
    pos, ang, vel, omg, vanc, anc, theta, thetad = ws[0], ws[1], ws[2], ws[3], ws[4], ws[5], ws[6], ws[7]
    jx, jz, jw = ws[11], ws[12], ws[13]
    kinematics(model, q, qd, pos, ang, vel, omg, vanc, anc, theta, thetad)
    n = q.shape[0]
    p = np.zeros(n)
    for i in range(length.shape[0]):
        _point_jacobian(model, q, anc, i, pos[i, 0], pos[i, 1], jx, jz, jw)
        for a in range(n):
            p[a] += mass[i] * (jx[a] * vel[i, 0] + jz[a] * vel[i, 1]) + inertia[i] * jw[a] * omg[i]
    for a in range(3, n):
        p[a] += armature * qd[a]
    for a in range(n):
        if not active[a]:
            p[a] = 0.0
    return p
