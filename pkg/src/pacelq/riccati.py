"""Dense solvers for Lyapunov and algebraic Riccati equations.

Everything here targets the small (n <= 8) systems that arise in two-player
LQ games with identity control weighting, so the Lyapunov equation is solved
by a direct vectorized (Kronecker) linear solve and the Riccati equation by
Newton-Kleinman iteration, each step of which is one Lyapunov solve.  The
Newton iteration is started from a stabilizing gain extracted from the stable
invariant subspace of the Hamiltonian matrix, with a Lyapunov-shift (Bass)
fallback when the subspace extraction is ill-conditioned.

Sign conventions:

* ``solve_lyapunov(drift, rhs)`` solves ``drift.T @ X + X @ drift + rhs = 0``.
* ``solve_are`` solves ``A.T P + P A - P B B.T P + Q = 0`` for the stabilizing
  ``P`` (control weight fixed to identity).
* ``solve_coupled_are`` solves the pair of one-sided equations in which each
  player's drift is shifted by the other player's feedback, by alternating
  (Gauss-Seidel) single-equation sweeps.

All returned matrices are symmetrized as ``(X + X.T) / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    NoConvergence,
    NonHurwitzDrift,
    NoStabilizingSolution,
    SingularSystem,
)

# Module-wide default tolerances; every solver accepts overrides.
LYAP_RESIDUAL_TOL = 1e-10
ARE_RESIDUAL_TOL = 1e-9
COUPLED_RESIDUAL_TOL = 1e-10
COUPLED_MAX_ITER = 500
NEWTON_MAX_ITER = 60
HURWITZ_MARGIN = -1e-12
SYMMETRY_TOL = 1e-12


def _as_square(name, m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {m.shape}")
    return m


def _require_symmetric(name, m, tol=SYMMETRY_TOL):
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if float(np.abs(m - m.T).max(initial=0.0)) > tol * scale:
        raise DimensionMismatch(f"{name} must be symmetric within {tol}")


def _sym(m):
    return (m + m.T) / 2.0


def spectral_abscissa(m):
    """Largest real part of the eigenvalues of ``m``."""
    return float(np.max(np.linalg.eigvals(m).real))


@dataclass
class AreSpec:
    """One algebraic Riccati equation with identity control weight.

    ``drift`` is the effective state matrix (it may already include the other
    player's feedback term), ``input`` the control injection matrix and
    ``state_cost`` the symmetric PSD state weight.
    """

    drift: np.ndarray
    input: np.ndarray
    state_cost: np.ndarray

    def __post_init__(self):
        self.drift = _as_square("drift", self.drift)
        self.state_cost = _as_square("state_cost", self.state_cost)
        self.input = np.asarray(self.input, dtype=float)
        if self.input.ndim == 1:
            self.input = self.input.reshape(-1, 1)
        n = self.drift.shape[0]
        if self.input.shape[0] != n or self.state_cost.shape[0] != n:
            raise DimensionMismatch(
                f"inconsistent dimensions: drift {self.drift.shape}, "
                f"input {self.input.shape}, state_cost {self.state_cost.shape}"
            )
        _require_symmetric("state_cost", self.state_cost)


@dataclass
class RiccatiSolution:
    """Stabilizing solution with its residual and closed-loop diagnostics."""

    p: np.ndarray
    residual_norm: float
    closed_loop_abscissa: float


@dataclass
class CoupledSolution:
    """Jointly stabilizing pair for the two coupled Riccati equations."""

    p_i: RiccatiSolution
    p_j: RiccatiSolution
    iterations: int


def lyapunov_operator_matrix(drift):
    """Kronecker matrix ``M`` with ``M @ vec(X) = vec(drift.T X + X drift)``.

    Row-major ``vec`` is used throughout; the operator is identical for the
    column-major convention because the two Kronecker terms swap.
    """
    n = drift.shape[0]
    eye = np.eye(n)
    at = drift.T
    return np.kron(at, eye) + np.kron(eye, at)


def _lyap_operator_batch(drifts):
    """Batched version of :func:`lyapunov_operator_matrix` for (B, n, n)."""
    n = drifts.shape[-1]
    eye = np.eye(n)
    at = np.swapaxes(drifts, -1, -2)
    m = np.einsum("bij,kl->bikjl", at, eye) + np.einsum("ij,bkl->bikjl", eye, at)
    return m.reshape(drifts.shape[0], n * n, n * n)


def lyapunov_residual(drift, x, rhs):
    """Frobenius norm of ``drift.T X + X drift + rhs``."""
    return float(np.linalg.norm(drift.T @ x + x @ drift + rhs))


def solve_lyapunov(drift, rhs, *, check_drift=True, tol=LYAP_RESIDUAL_TOL):
    """Solve ``drift.T @ X + X @ drift + rhs = 0`` for symmetric ``X``.

    Parameters
    ----------
    drift : (n, n) array
        Hurwitz state matrix (strictly stable; checked unless
        ``check_drift=False``).
    rhs : (n, n) array
        Symmetric right-hand side.
    tol : float
        Acceptable Frobenius residual, relative to ``max(1, ||rhs||_F)``.

    Raises
    ------
    NonHurwitzDrift
        If ``drift`` has an eigenvalue with real part >= -1e-12.
    SingularSystem
        If the vectorized linear system is numerically rank-deficient.
    """
    drift = _as_square("drift", drift)
    rhs = _as_square("rhs", rhs)
    if drift.shape != rhs.shape:
        raise DimensionMismatch("drift and rhs must have the same shape")
    _require_symmetric("rhs", rhs)
    if check_drift and spectral_abscissa(drift) >= HURWITZ_MARGIN:
        raise NonHurwitzDrift(
            f"drift spectral abscissa {spectral_abscissa(drift):.3e} >= {HURWITZ_MARGIN}"
        )
    n = drift.shape[0]
    op = lyapunov_operator_matrix(drift)
    try:
        x = np.linalg.solve(op, -rhs.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"lyapunov system singular: {exc}") from exc
    x = _sym(x.reshape(n, n))
    res = lyapunov_residual(drift, x, rhs)
    if not np.isfinite(res) or res > tol * max(1.0, float(np.linalg.norm(rhs))):
        raise SingularSystem(f"lyapunov residual {res:.3e} exceeds tolerance {tol:.1e}")
    return x


def _solve_lyapunov_multi(drift, rhs_stack):
    """Solve the same Lyapunov equation for several right-hand sides.

    ``rhs_stack`` has shape (k, n, n); one factorization serves all k solves.
    No Hurwitz or residual check: internal fast path for sensitivity stacks.
    """
    n = drift.shape[0]
    op = lyapunov_operator_matrix(drift)
    b = -rhs_stack.reshape(rhs_stack.shape[0], n * n).T
    try:
        x = np.linalg.solve(op, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"lyapunov system singular: {exc}") from exc
    x = x.T.reshape(rhs_stack.shape[0], n, n)
    return (x + np.swapaxes(x, -1, -2)) / 2.0


def _hamiltonian_gain(a, b, q):
    """Stabilizing feedback from the Hamiltonian stable invariant subspace.

    Returns ``None`` when the subspace extraction fails (wrong dimension or
    ill-conditioned basis); callers fall back to the Lyapunov-shift init.
    """
    n = a.shape[0]
    s = b @ b.T
    ham = np.block([[a, -s], [-q, -a.T]])
    try:
        _, z, sdim = scipy.linalg.schur(ham, output="real", sort="lhp")
    except (scipy.linalg.LinAlgError, ValueError):
        return None
    if sdim != n:
        return None
    u1 = z[:n, :n]
    u2 = z[n:, :n]
    try:
        p0 = np.linalg.solve(u1.T, u2.T).T
    except np.linalg.LinAlgError:
        return None
    p0 = _sym(p0)
    gain = b.T @ p0
    if spectral_abscissa(a - b @ gain) >= 0.0:
        return None
    return gain


def _bass_shift_gain(a, b):
    """Stabilizing feedback via a shifted-Lyapunov (Bass) construction.

    Solves ``(A + beta I) X + X (A + beta I).T = 2 B B.T`` with a shift that
    makes ``-(A + beta I)`` Hurwitz; ``K = B.T inv(X)`` then stabilizes
    ``A - B K`` whenever ``(A, B)`` is controllable.
    """
    if spectral_abscissa(a) < 0.0:
        return np.zeros((b.shape[1], a.shape[0]))
    beta = float(np.linalg.norm(a, ord="fro")) + 1.0
    shifted = -(a + beta * np.eye(a.shape[0]))
    try:
        x = solve_lyapunov(shifted.T, 2.0 * b @ b.T, check_drift=False)
        gain = np.linalg.solve(x, b).T
    except (SingularSystem, np.linalg.LinAlgError):
        return None
    if spectral_abscissa(a - b @ gain) >= 0.0:
        return None
    return gain


def are_residual(a, b, q, p):
    """Frobenius norm of ``A.T P + P A - P B B.T P + Q``."""
    s = b @ b.T
    return float(np.linalg.norm(a.T @ p + p @ a - p @ s @ p + q))


def solve_are(spec, *, tol=ARE_RESIDUAL_TOL, max_iter=NEWTON_MAX_ITER, p_init=None):
    """Stabilizing solution of one algebraic Riccati equation.

    Newton-Kleinman iteration: given a stabilizing gain ``K``, solve the
    Lyapunov equation ``(A - BK).T P + P (A - BK) + Q + K.T K = 0`` and set
    ``K = B.T P``; repeat until the Riccati residual is below tolerance.
    ``p_init`` may carry a previous solution used as warm start when its gain
    is still stabilizing.

    Raises
    ------
    NoStabilizingSolution
        When no stabilizing initial gain can be constructed or the iteration
        fails to reach the residual tolerance with a Hurwitz closed loop.
    """
    a, b, q = spec.drift, spec.input, spec.state_cost
    n = a.shape[0]
    if np.linalg.norm(b) == 0.0:
        # Degenerate input: the equation is a plain Lyapunov equation.
        try:
            p = solve_lyapunov(a, q)
        except (NonHurwitzDrift, SingularSystem) as exc:
            raise NoStabilizingSolution(f"zero input matrix with unstable drift: {exc}") from exc
        return RiccatiSolution(p, are_residual(a, b, q, p), spectral_abscissa(a))

    gain = None
    if p_init is not None:
        warm = b.T @ _sym(np.asarray(p_init, dtype=float))
        if spectral_abscissa(a - b @ warm) < 0.0:
            gain = warm
    if gain is None:
        gain = _hamiltonian_gain(a, b, q)
    if gain is None:
        gain = _bass_shift_gain(a, b)
    if gain is None:
        raise NoStabilizingSolution("could not construct a stabilizing initial gain")

    # Refine well past the contract tolerance; the loop exits on stagnation.
    newton_target = 1e-13 * max(1.0, float(np.linalg.norm(q)))
    best_p = None
    best_res = np.inf
    prev_res = np.inf
    for _ in range(max_iter):
        a_cl = a - b @ gain
        try:
            p = solve_lyapunov(a_cl, q + gain.T @ gain, check_drift=False)
        except SingularSystem as exc:
            raise NoStabilizingSolution(f"newton step failed: {exc}") from exc
        res = are_residual(a, b, q, p)
        if res < best_res:
            best_p, best_res = p, res
        if res < newton_target or res >= 0.9 * prev_res:
            break
        prev_res = res
        gain = b.T @ p

    if best_p is None:
        raise NoStabilizingSolution("newton iteration produced no iterate")
    abscissa = spectral_abscissa(a - b @ (b.T @ best_p))
    if best_res > tol * max(1.0, float(np.linalg.norm(q))) or abscissa >= 0.0:
        raise NoStabilizingSolution(
            f"no stabilizing solution: residual {best_res:.3e}, abscissa {abscissa:.3e}"
        )
    return RiccatiSolution(best_p, best_res, abscissa)


def coupled_residuals(a, b_i, b_j, q_i, q_j, p_i, p_j):
    """Residual norms of both coupled equations at the pair ``(p_i, p_j)``."""
    drift_i = a - b_j @ (b_j.T @ p_j)
    drift_j = a - b_i @ (b_i.T @ p_i)
    return (
        are_residual(drift_i, b_i, q_i, p_i),
        are_residual(drift_j, b_j, q_j, p_j),
    )


def solve_coupled_are(
    a,
    b_i,
    b_j,
    q_i,
    q_j,
    *,
    tol=COUPLED_RESIDUAL_TOL,
    max_iter=COUPLED_MAX_ITER,
    init=None,
):
    """Solve the coupled pair of Riccati equations by alternating sweeps.

    Each sweep solves player i's equation with player j's feedback frozen in
    the drift, then the reverse.  Iteration stops when both coupled residuals
    fall below ``tol``.  ``init`` may carry a warm-start pair ``(p_i, p_j)``.

    Raises
    ------
    NoConvergence
        If the sweep cap is hit; the best iterate is attached as ``best``.
    NoStabilizingSolution
        If an inner single-equation solve fails.
    """
    a = _as_square("a", a)
    b_i = np.asarray(b_i, dtype=float).reshape(a.shape[0], -1)
    b_j = np.asarray(b_j, dtype=float).reshape(a.shape[0], -1)
    q_i = _as_square("q_i", q_i)
    q_j = _as_square("q_j", q_j)

    if init is not None:
        p_i, p_j = (_sym(np.asarray(m, dtype=float)) for m in init)
    else:
        p_i = None
        p_j = np.zeros_like(a)

    best = None
    best_err = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        sol_i = solve_are(
            AreSpec(a - b_j @ (b_j.T @ p_j), b_i, q_i), tol=np.inf, p_init=p_i
        )
        p_i = sol_i.p
        sol_j = solve_are(
            AreSpec(a - b_i @ (b_i.T @ p_i), b_j, q_j), tol=np.inf, p_init=p_j
        )
        p_j = sol_j.p
        res_i, res_j = coupled_residuals(a, b_i, b_j, q_i, q_j, p_i, p_j)
        err = max(res_i, res_j)
        if err < best_err:
            best_err = err
            joint = spectral_abscissa(a - b_i @ (b_i.T @ p_i) - b_j @ (b_j.T @ p_j))
            best = CoupledSolution(
                RiccatiSolution(p_i, res_i, joint),
                RiccatiSolution(p_j, res_j, joint),
                iterations,
            )
        if err < tol:
            return best
    raise NoConvergence(
        f"coupled sweeps did not reach tol {tol:.1e} in {max_iter} iterations "
        f"(best residual {best_err:.3e})",
        best=best,
    )


def riccati_sensitivity(spec, sol, dq, *, tol=LYAP_RESIDUAL_TOL):
    """Derivative of the stabilizing Riccati solution along ``dq``.

    Differentiating the Riccati equation at the stabilizing solution gives a
    Lyapunov equation in the closed-loop drift, which is Hurwitz, so the
    derivative exists and is the unique solution of
    ``A_cl.T dP + dP A_cl + dq = 0`` with ``A_cl = drift - B B.T P``.
    """
    dq = _as_square("dq", dq)
    _require_symmetric("dq", dq)
    a_cl = spec.drift - spec.input @ (spec.input.T @ sol.p)
    return solve_lyapunov(a_cl, dq, tol=tol)


# ---------------------------------------------------------------------------
# Batched internals.  The belief-update loop reconstructs one Riccati solution
# per history entry per decision epoch; doing that through the scalar API is
# dominated by Python and LAPACK call overhead, so the hot path below runs
# Newton-Kleinman on a whole stack of equations (shared input matrix and state
# cost, per-entry drifts) with vectorized Lyapunov solves.
# ---------------------------------------------------------------------------


def _are_residual_batch(drifts, s, q, p):
    at_p = np.swapaxes(drifts, -1, -2) @ p
    res = at_p + np.swapaxes(at_p, -1, -2) - p @ s @ p + q
    return np.linalg.norm(res, axis=(-2, -1))


def solve_are_batch(drifts, input_mat, q, *, p_init=None, tol=ARE_RESIDUAL_TOL, max_iter=NEWTON_MAX_ITER):
    """Newton-Kleinman over a stack of Riccati equations.

    ``drifts`` has shape (B, n, n); ``input_mat`` (n, m) and ``q`` (n, n) are
    shared by all instances.  ``p_init`` (B, n, n) supplies warm starts; for
    entries whose warm gain is not stabilizing (or when absent) the init falls
    back to the per-instance Hamiltonian subspace gain.

    Returns ``(p, residuals)`` with shapes (B, n, n) and (B,).

    Raises
    ------
    NoStabilizingSolution
        If any instance cannot be initialized or fails to converge.
    """
    drifts = np.asarray(drifts, dtype=float)
    nb, n = drifts.shape[0], drifts.shape[1]
    b = np.asarray(input_mat, dtype=float).reshape(n, -1)
    s = b @ b.T

    gains = np.empty((nb, b.shape[1], n))
    need_cold = np.ones(nb, dtype=bool)
    if p_init is not None:
        warm = np.matmul(b.T, (p_init + np.swapaxes(p_init, -1, -2)) / 2.0)
        a_cl = drifts - np.matmul(b, warm)
        stable = np.max(np.linalg.eigvals(a_cl).real, axis=-1) < 0.0
        gains[stable] = warm[stable]
        need_cold = ~stable
    for idx in np.flatnonzero(need_cold):
        gain = _hamiltonian_gain(drifts[idx], b, q)
        if gain is None:
            gain = _bass_shift_gain(drifts[idx], b)
        if gain is None:
            raise NoStabilizingSolution(
                f"batch instance {idx}: no stabilizing initial gain"
            )
        gains[idx] = gain

    newton_target = 1e-13 * max(1.0, float(np.linalg.norm(q)))
    op_eye = np.eye(n)
    p = None
    best_res = np.full(nb, np.inf)
    best_p = None
    for _ in range(max_iter):
        a_cl = drifts - np.matmul(b, gains)
        rhs = q + np.matmul(np.swapaxes(gains, -1, -2), gains)
        at = np.swapaxes(a_cl, -1, -2)
        op = (
            np.einsum("bij,kl->bikjl", at, op_eye)
            + np.einsum("ij,bkl->bikjl", op_eye, at)
        ).reshape(nb, n * n, n * n)
        try:
            vec = np.linalg.solve(op, -rhs.reshape(nb, n * n, 1))
        except np.linalg.LinAlgError as exc:
            raise NoStabilizingSolution(f"batched newton step singular: {exc}") from exc
        p = vec.reshape(nb, n, n)
        p = (p + np.swapaxes(p, -1, -2)) / 2.0
        res = _are_residual_batch(drifts, s, q, p)
        improved = res < best_res
        if best_p is None:
            best_p = p.copy()
            best_res = res.copy()
        else:
            best_p[improved] = p[improved]
            best_res[improved] = res[improved]
        if np.all(best_res < newton_target) or not np.any(improved):
            break
        gains = np.matmul(b.T, p)

    bad = ~np.isfinite(best_res) | (best_res > tol * max(1.0, float(np.linalg.norm(q))))
    if np.any(bad):
        raise NoStabilizingSolution(
            f"batched solve failed on {int(bad.sum())} instance(s); "
            f"worst residual {float(np.max(best_res)):.3e}"
        )
    return best_p, best_res


def sensitivity_batch(a_cl, dq_stack):
    """Riccati sensitivities for a stack of closed-loop drifts.

    ``a_cl`` has shape (B, n, n), ``dq_stack`` (d, n, n); the result has shape
    (B, d, n, n) where entry (b, i) solves the Lyapunov equation in
    ``a_cl[b]`` with right-hand side ``dq_stack[i]``.
    """
    nb, n = a_cl.shape[0], a_cl.shape[1]
    d = dq_stack.shape[0]
    op = _lyap_operator_batch(a_cl)
    rhs = np.broadcast_to(
        -dq_stack.reshape(d, n * n).T, (nb, n * n, d)
    ).copy()
    try:
        sol = np.linalg.solve(op, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"batched sensitivity solve singular: {exc}") from exc
    out = np.swapaxes(sol, 1, 2).reshape(nb, d, n, n)
    return (out + np.swapaxes(out, -1, -2)) / 2.0
