import math
from types import SimpleNamespace

import pytest

from coevo.sim2d import PhysicsConfig, build_world

FRICTIONLESS = PhysicsConfig(joint_damping=0.0, joint_armature=0.0)


def element(length, radius, parent=-1, anchor=0.5, density=1000.0):
    mass = density * math.pi * radius * radius * length
    return SimpleNamespace(length=length, radius=radius, mass=mass, parent=parent, anchor=anchor)


def joint(parent, child, rest=0.0, lower=-1.0, upper=1.0, actuated=True, max_torque=40.0):
    return SimpleNamespace(parent=parent, child=child, rest_angle=rest, lower=lower, upper=upper,
                           actuated=actuated, max_torque=max_torque)


def plan(elements, joints, root_angle=0.0):
    return SimpleNamespace(elements=elements, joints=joints, root_angle=root_angle)


@pytest.fixture
def single_link():
    return plan([element(0.5, 0.05)], [])


@pytest.fixture
def pendulum():
    """Two passive links pinned at the proximal end, joint range effectively unlimited."""
    p = plan([element(0.5, 0.05), element(0.5, 0.05, 0, 1.0)], [joint(0, 1, 0.0, -1e3, 1e3, actuated=False)])
    return p


def pinned_pendulum_world(p, bend=0.7, physics=FRICTIONLESS):
    w = build_world(p, pin=(0.0, 5.0), physics=physics)
    w.q[3] = bend
    w.set_velocities(w.qd)
    return w
