"""Two-player LQ game model: cost parameterizations, feedback law, dynamics.

The game is ``xdot = A x + B_i u_i + B_j u_j`` with per-player quadratic state
costs ``Q_i, Q_j`` and identity control weights.  Each player's cost matrix is
described by a :class:`QParameterization` mapping a parameter vector ``theta``
to a symmetric matrix; the same maps drive the online estimates of the other
player's parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import riccati
from .errors import DimensionMismatch, NonFiniteState

EPSILON_PD = 1e-6
CONTROLLABILITY_RTOL = 1e-8


class QParameterization:
    """Map between a parameter vector and a symmetric state-cost matrix."""

    dim: int
    n: int

    def to_q(self, theta):
        raise NotImplementedError

    def dq(self, index):
        """Derivative of the cost matrix along parameter ``index``."""
        raise NotImplementedError

    def project(self, theta, epsilon_pd=EPSILON_PD):
        """Nearest feasible parameters (induced Q positive definite)."""
        raise NotImplementedError

    def extract(self, q):
        """Inverse of :meth:`to_q` on representable matrices."""
        raise NotImplementedError

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.dim:
            raise DimensionMismatch(
                f"{type(self).__name__} expects {self.dim} parameter(s), got {theta.shape[0]}"
            )
        return theta


@dataclass
class ScaleParameterization(QParameterization):
    """One scalar scaling a fixed PSD diagonal base matrix."""

    base: np.ndarray

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        if self.base.ndim == 1:
            self.base = np.diag(self.base)
        if np.any(np.diag(self.base) < 0.0):
            raise ValueError("scale base must have nonnegative diagonal")
        self.n = self.base.shape[0]
        self.dim = 1

    def to_q(self, theta):
        theta = self._check(theta)
        return float(theta[0]) * self.base

    def dq(self, index):
        if index != 0:
            raise DimensionMismatch("scale parameterization has a single parameter")
        return self.base.copy()

    def project(self, theta, epsilon_pd=EPSILON_PD):
        theta = self._check(theta)
        return np.maximum(theta, epsilon_pd)

    def extract(self, q):
        q = np.asarray(q, dtype=float)
        anchor = int(np.argmax(np.diag(self.base)))
        return np.array([q[anchor, anchor] / self.base[anchor, anchor]])


@dataclass
class DiagonalParameterization(QParameterization):
    """Parameters are the diagonal entries of the cost matrix."""

    n: int

    def __post_init__(self):
        self.dim = self.n

    def to_q(self, theta):
        return np.diag(self._check(theta))

    def dq(self, index):
        d = np.zeros((self.n, self.n))
        d[index, index] = 1.0
        return d

    def project(self, theta, epsilon_pd=EPSILON_PD):
        return np.maximum(self._check(theta), epsilon_pd)

    def extract(self, q):
        return np.diag(np.asarray(q, dtype=float)).copy()


@dataclass
class FullParameterization(QParameterization):
    """Parameters are the flattened (vectorized) cost matrix entries."""

    n: int

    def __post_init__(self):
        self.dim = self.n * self.n

    def to_q(self, theta):
        m = self._check(theta).reshape(self.n, self.n)
        return (m + m.T) / 2.0

    def dq(self, index):
        r, c = divmod(index, self.n)
        d = np.zeros((self.n, self.n))
        d[r, c] += 0.5
        d[c, r] += 0.5
        if r == c:
            d[r, c] = 1.0
        return d

    def project(self, theta, epsilon_pd=EPSILON_PD):
        q = self.to_q(theta)
        vals, vecs = np.linalg.eigh(q)
        if vals[0] >= epsilon_pd:
            return q.reshape(-1)
        vals = np.maximum(vals, epsilon_pd)
        return ((vecs * vals) @ vecs.T).reshape(-1)

    def extract(self, q):
        return np.asarray(q, dtype=float).reshape(-1).copy()


def theta_to_q(param, theta):
    """Cost matrix induced by ``theta`` under ``param``."""
    return param.to_q(theta)


def project_theta(param, theta, epsilon_pd=EPSILON_PD):
    """Project ``theta`` onto the feasible set (induced Q positive definite)."""
    return param.project(theta, epsilon_pd=epsilon_pd)


def controllability_rank(a, b, rtol=CONTROLLABILITY_RTOL):
    """Rank of ``[B, AB, ..., A^{n-1} B]`` with a relative singular value cut."""
    n = a.shape[0]
    blocks = [b]
    for _ in range(n - 1):
        blocks.append(a @ blocks[-1])
    svals = np.linalg.svd(np.hstack(blocks), compute_uv=False)
    if svals.size == 0 or svals[0] == 0.0:
        return 0
    return int(np.sum(svals > rtol * svals[0]))


@dataclass
class GameSpec:
    """Dynamics and true costs of the two-player game.

    Construction validates dimensional consistency, symmetry/PSD-ness of the
    cost matrices, and controllability of ``(A, B_k)`` for both players.
    """

    a: np.ndarray
    b_i: np.ndarray
    b_j: np.ndarray
    q_i: np.ndarray
    q_j: np.ndarray
    param_i: QParameterization
    param_j: QParameterization

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        n = self.a.shape[0]
        if self.a.shape != (n, n):
            raise DimensionMismatch(f"dynamics matrix must be square, got {self.a.shape}")
        self.b_i = np.asarray(self.b_i, dtype=float).reshape(n, -1)
        self.b_j = np.asarray(self.b_j, dtype=float).reshape(n, -1)
        for name, q in (("q_i", self.q_i), ("q_j", self.q_j)):
            q = np.asarray(q, dtype=float)
            if q.shape != (n, n):
                raise DimensionMismatch(f"{name} must be {n}x{n}, got {q.shape}")
            if np.abs(q - q.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(q).max()):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(q)[0] < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
            setattr(self, name, (q + q.T) / 2.0)
        for name, b in (("b_i", self.b_i), ("b_j", self.b_j)):
            if controllability_rank(self.a, b) < n:
                raise ValueError(f"(a, {name}) is not controllable")
        for name, param in (("param_i", self.param_i), ("param_j", self.param_j)):
            if param.n != n:
                raise DimensionMismatch(f"{name} is sized for n={param.n}, game has n={n}")

    @property
    def n(self):
        return self.a.shape[0]

    def nash(self, q_i=None, q_j=None, **kwargs):
        """Coupled Riccati pair for the given (default: true) cost matrices."""
        return riccati.solve_coupled_are(
            self.a,
            self.b_i,
            self.b_j,
            self.q_i if q_i is None else q_i,
            self.q_j if q_j is None else q_j,
            **kwargs,
        )


def feedback_control(b, p, x):
    """Feedback law ``u = -B.T P x`` (identity control weight)."""
    return -(np.asarray(b, dtype=float).T @ (np.asarray(p, dtype=float) @ np.asarray(x, dtype=float)))


def rk4_step_matrices(a, dt, substeps=1):
    """One-step transition pair ``(R, S)`` of RK4 with zero-order-hold input.

    A classical RK4 step of ``xdot = A x + c`` with constant ``c`` is the
    affine map ``x+ = R x + S c`` where ``R`` is the degree-4 Taylor polynomial
    of ``exp(h A)`` and ``S = h (I + hA/2 + (hA)^2/6 + (hA)^3/24)``.  With
    ``substeps`` the per-substep maps are composed over ``dt``.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    n = a.shape[0]
    h = dt / substeps
    ha = h * np.asarray(a, dtype=float)
    eye = np.eye(n)
    ha2 = ha @ ha
    ha3 = ha2 @ ha
    ha4 = ha3 @ ha
    r = eye + ha + ha2 / 2.0 + ha3 / 6.0 + ha4 / 24.0
    s = h * (eye + ha / 2.0 + ha2 / 6.0 + ha3 / 24.0)
    r_total = r
    s_total = s
    for _ in range(substeps - 1):
        s_total = r @ s_total + s
        r_total = r @ r_total
    return r_total, s_total


def simulate_segment(a, b_i, b_j, x, u_i, u_j, dt, substeps=1):
    """Integrate ``xdot = A x + B_i u_i + B_j u_j`` over ``dt`` with held inputs.

    Classical 4th-order Runge-Kutta with zero-order-hold controls; local error
    is O((dt/substeps)^5) per substep.
    """
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    forcing = np.asarray(b_i, dtype=float) @ np.atleast_1d(u_i) + np.asarray(
        b_j, dtype=float
    ) @ np.atleast_1d(u_j)
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = dt / substeps
    for _ in range(substeps):
        k1 = a @ x + forcing
        k2 = a @ (x + 0.5 * h * k1) + forcing
        k3 = a @ (x + 0.5 * h * k2) + forcing
        k4 = a @ (x + h * k3) + forcing
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("state became non-finite during integration")
    return x
