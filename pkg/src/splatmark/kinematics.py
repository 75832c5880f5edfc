"""Trajectory kinematics: velocity, acceleration, curvature, gating weights.

A trajectory is a (T, 3) sequence of positions sampled at a fixed time step.
From it we derive finite-difference velocity and acceleration, the motion
curvature ||v x a|| / ||v||^3 that flags sharp direction changes, and the
embedding confidence weight exp(-kappa/tau) that shields those instants
from watermark gradients.
"""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_EPS = 1e-8
DEFAULT_TAU = 1.0


class EmptyTrajectoryError(ValueError):
    pass


@dataclass
class Trajectory:
    """Positions of one point over time, shape (T, 3), with time step dt > 0."""

    positions: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim == 1:
            self.positions = self.positions[np.newaxis, :]
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (T, 3), got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise EmptyTrajectoryError("trajectory must contain at least one position")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("trajectory positions must be finite")

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class KinematicProfile:
    """Derived per-timestep kinematics of one trajectory.

    All arrays have length T; boundary entries are filled by replication so
    downstream gating never sees artificial spikes at the sequence ends.
    """

    velocity: np.ndarray = field(repr=False)
    acceleration: np.ndarray = field(repr=False)
    curvature: np.ndarray = field(repr=False)
    weight: np.ndarray = field(repr=False)


def finite_differences(traj: Trajectory):
    """Backward-difference velocity and acceleration of a trajectory.

    v[t] = (x[t] - x[t-1]) / dt for t >= 1 and a[t] = (v[t] - v[t-1]) / dt
    for t >= 2. Boundary entries replicate the first defined value
    (v[0] := v[1], a[0] := a[1] := a[2]); with fewer than 3 samples the
    undefined derivatives are zero.

    Returns (velocities, accelerations), each shape (T, 3).
    """
    x = traj.positions
    T = x.shape[0]
    v = np.zeros_like(x)
    a = np.zeros_like(x)
    if T >= 2:
        v[1:] = np.diff(x, axis=0) / traj.dt
        v[0] = v[1]
    if T >= 3:
        a[2:] = np.diff(v[1:], axis=0) / traj.dt
        a[0] = a[1] = a[2]
    return v, a


def spatio_temporal_curvature(v, a, eps=DEFAULT_EPS):
    """Curvature ||v x a|| / (||v||^3 + eps) of one velocity/acceleration pair.

    eps > 0 keeps the value finite at zero velocity; eps=0 is allowed when the
    caller guarantees ||v|| > 0 (used by exact scale-covariance checks).
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    cross = np.cross(v, a)
    speed = np.linalg.norm(v, axis=-1)
    denom = speed**3 + eps
    num = np.linalg.norm(cross, axis=-1)
    # 0/0 at a resting point with eps=0 counts as zero curvature.
    out = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(out) if out.ndim == 0 else out


def confidence_weight(kappa, tau=DEFAULT_TAU):
    """Embedding confidence exp(-kappa/tau) in (0, 1]; tau is the decay scale."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    kappa = np.asarray(kappa, dtype=float)
    out = np.exp(-kappa / tau)
    return float(out) if out.ndim == 0 else out


def kinematic_profile(traj: Trajectory, eps=DEFAULT_EPS, tau=DEFAULT_TAU) -> KinematicProfile:
    """Full per-timestep kinematics of a trajectory.

    For T < 3 the acceleration is undefined everywhere, so curvature is zero
    and the weight one for every timestep.
    """
    v, a = finite_differences(traj)
    if len(traj) < 3:
        kappa = np.zeros(len(traj))
        w = np.ones(len(traj))
    else:
        kappa = spatio_temporal_curvature(v, a, eps=eps)
        w = confidence_weight(kappa, tau=tau)
    return KinematicProfile(velocity=v, acceleration=a, curvature=kappa, weight=w)


def normalize_weights(weights):
    """Mini-batch normalization of confidence weights.

    Maps each weight through logistic((w - mean) / (std + 1e-8)) so a batch
    with a wide dynamic range still lands well inside (0, 1). The map is
    strictly monotone, so the ordering of the batch is preserved; a constant
    batch maps to 0.5.
    """
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise ValueError("weight batch must be nonempty")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight batch must be finite")
    z = (w - w.mean()) / (w.std() + 1e-8)
    return 1.0 / (1.0 + np.exp(-z))
