"""Entropic optimal transport between adjacent-frame Gaussian populations.

Resampling (densify/prune) breaks index-wise correspondence across frames,
so cross-frame consistency is anchored instead on a Sinkhorn coupling of the
two point populations and a barycentric transfer of the previous frame's
states onto the current one.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

DEFAULT_MAX_ITER = 1000
DEFAULT_TOL = 1e-6


@dataclass
class DiscreteMeasure:
    """N weighted points; masses are nonnegative and sum to one."""

    points: np.ndarray
    masses: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2:
            raise ValueError(f"points must be (N, d), got {self.points.shape}")
        n = self.points.shape[0]
        if n < 1:
            raise ValueError("measure needs at least one point")
        if self.masses is None:
            self.masses = np.full(n, 1.0 / n)
        else:
            self.masses = np.asarray(self.masses, dtype=float)
        if self.masses.shape != (n,):
            raise ValueError("masses must match point count")
        if np.any(self.masses < 0):
            raise ValueError("masses must be nonnegative")
        if abs(self.masses.sum() - 1.0) > 1e-12:
            raise ValueError(f"masses must sum to 1, got {self.masses.sum()!r}")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class TransportPlan:
    """Nonnegative coupling with its achieved marginal errors and iteration count."""

    coupling: np.ndarray
    row_marginal_error: float
    col_marginal_error: float
    iterations: int
    converged: bool

    def total_cost(self, cost):
        """Transport cost <coupling, cost>."""
        return float(np.sum(self.coupling * cost))


def cost_matrix(xs_t, xs_prev):
    """Pairwise squared Euclidean distances, shape (N, M)."""
    xs_t = np.asarray(xs_t, dtype=float)
    xs_prev = np.asarray(xs_prev, dtype=float)
    if xs_t.shape[0] == 0 or xs_prev.shape[0] == 0:
        raise ValueError("point sets must be nonempty")
    diff = xs_t[:, np.newaxis, :] - xs_prev[np.newaxis, :, :]
    return np.sum(diff * diff, axis=2)


def default_reg(cost):
    """Default entropic regularizer: 1% of the median cost (floor 1e-8)."""
    med = float(np.median(cost))
    return max(0.01 * med, 1e-8)


def sinkhorn(mu_t: DiscreteMeasure, mu_prev: DiscreteMeasure, reg=None,
             max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL, cost=None) -> TransportPlan:
    """Entropy-regularized optimal transport via log-domain Sinkhorn.

    Minimizes <gamma, C> - reg * H(gamma) over couplings of the two measures.
    Runs in the log domain so small regularizers do not underflow. Stops when
    both marginal max-errors drop below tol; hitting max_iter is reported in
    the plan metadata, not raised.
    """
    if cost is None:
        cost = cost_matrix(mu_t.points, mu_prev.points)
    else:
        cost = np.asarray(cost, dtype=float)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if reg is None:
        reg = default_reg(cost)
    if reg <= 0:
        raise ValueError(f"reg must be positive, got {reg}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")

    a, b = mu_t.masses, mu_prev.masses
    log_a = np.log(np.maximum(a, 1e-300))
    log_b = np.log(np.maximum(b, 1e-300))
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    neg_c = -cost / reg

    row_err = col_err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = reg * (log_a - logsumexp(neg_c + g[np.newaxis, :] / reg, axis=1))
        g = reg * (log_b - logsumexp(neg_c + f[:, np.newaxis] / reg, axis=0))
        log_gamma = (f[:, np.newaxis] + g[np.newaxis, :]) / reg + neg_c
        gamma = np.exp(log_gamma)
        row_err = float(np.max(np.abs(gamma.sum(axis=1) - a)))
        col_err = float(np.max(np.abs(gamma.sum(axis=0) - b)))
        if row_err <= tol and col_err <= tol:
            break

    return TransportPlan(coupling=gamma, row_marginal_error=row_err,
                         col_marginal_error=col_err, iterations=it,
                         converged=row_err <= tol and col_err <= tol)


def barycentric_map(plan: TransportPlan, states_prev):
    """Row-normalized transfer of previous-frame states through the plan.

    zhat[i] = sum_j gamma[i, j] / sum_k gamma[i, k] * states_prev[j]; each
    output is a convex combination, hence inside the hull of states_prev.
    """
    gamma = plan.coupling
    states_prev = np.asarray(states_prev, dtype=float)
    if gamma.shape[1] != states_prev.shape[0]:
        raise ValueError("plan columns must match number of previous states")
    row_sums = gamma.sum(axis=1)
    bad = np.nonzero(row_sums <= 0)[0]
    if bad.size:
        raise ValueError(f"transport plan row {bad[0]} has zero mass; cannot map")
    return (gamma / row_sums[:, np.newaxis]) @ states_prev
