"""Online peer-cost estimation for two-player LQ games.

Each agent keeps a sliding history of observed states, its own applied
controls and the gain pair it predicted at the time.  At every decision epoch
it replays that window twice:

* a state prediction driven by its own recorded controls plus the peer
  control implied by the current peer-cost estimate, whose mismatch against
  the observed states scores the peer-cost parameters, and
* an error trajectory forced by the gap between its own recorded controls and
  the controls the peer would have predicted for it, which scores the agent's
  model of the peer's estimate of its own cost.

Both scores are differentiated exactly through the per-entry Riccati
reconstructions (a Lyapunov solve per parameter) and the window integrator,
and the two parameter vectors descend their respective gradients.  After each
update the agent re-solves the coupled Riccati pair at the new estimates to
predict the next gain pair, and refreshes its own policy gain against the
predicted peer gain.

The ``peer-optimal`` mode models the peer as already knowing the agent's true
cost: the agent's own-parameter estimate is pinned to the truth and only the
peer-cost chain is active.  Because the stored own-gain then coincides with
the agent's actual policy gain, the replay reconstruction couples through the
true current gain, which is exactly what the expert-peer approximation
prescribes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import lqgame, riccati
from .errors import (
    DimensionMismatch,
    InfeasibleInitialization,
    NoConvergence,
    NonFiniteState,
    NonHurwitzDrift,
    NonMonotoneTime,
    NoStabilizingSolution,
    SingularSystem,
)

MODE_PACE = "pace"
MODE_PEER_OPTIMAL = "peer-optimal"
SPECTRUM_FD_STEP = 1e-5

_SOLVER_FAILURES = (
    NoStabilizingSolution,
    SingularSystem,
    NonHurwitzDrift,
    NonFiniteState,
    np.linalg.LinAlgError,
)


@dataclass
class HistoryEntry:
    """State, own control and predicted gain pair at one decision time."""

    tau: float
    x: np.ndarray
    u_self: np.ndarray
    p_self_hat: np.ndarray
    p_peer_hat: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.u_self = np.asarray(self.u_self, dtype=float).reshape(-1)
        self.p_self_hat = np.asarray(self.p_self_hat, dtype=float)
        self.p_peer_hat = np.asarray(self.p_peer_hat, dtype=float)
        for name, value in (
            ("x", self.x),
            ("u_self", self.u_self),
            ("p_self_hat", self.p_self_hat),
            ("p_peer_hat", self.p_peer_hat),
        ):
            if not np.all(np.isfinite(value)):
                raise NonFiniteState(f"history entry field {name} is non-finite")


class HistoryStack:
    """Sliding window of history entries with strictly increasing timestamps."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def record(self, entry):
        if self.entries and entry.tau <= self.entries[-1].tau:
            raise NonMonotoneTime(
                f"entry at tau={entry.tau} does not follow tau={self.entries[-1].tau}"
            )
        self.entries.append(entry)
        if len(self.entries) > self.capacity:
            del self.entries[0]
        return self

    def taus(self):
        return [e.tau for e in self.entries]


def record(stack, entry):
    """Append ``entry``, evicting the oldest record when over capacity."""
    return stack.record(entry)


@dataclass
class BeliefState:
    """Paired cost estimates and the gain pair predicted from them."""

    theta_peer: np.ndarray
    theta_self: np.ndarray
    p_self_hat: np.ndarray
    p_peer_hat: np.ndarray


@dataclass
class LearnerConfig:
    mode: str = MODE_PACE
    alpha: float = 0.1
    capacity: int = 15
    epsilon_pd: float = lqgame.EPSILON_PD
    coupled_tol: float = riccati.COUPLED_RESIDUAL_TOL
    coupled_max_iter: int = riccati.COUPLED_MAX_ITER

    def __post_init__(self):
        if self.mode not in (MODE_PACE, MODE_PEER_OPTIMAL):
            raise ValueError(f"unknown learner mode {self.mode!r}")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be > 0")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")


@dataclass(frozen=True)
class AgentView:
    """One agent's slice of the game: own/peer roles resolved."""

    a: np.ndarray
    b_self: np.ndarray
    b_peer: np.ndarray
    param_self: lqgame.QParameterization
    param_peer: lqgame.QParameterization
    q_self_true: np.ndarray
    theta_self_true: np.ndarray


def agent_views(game, theta_true_i, theta_true_j):
    """Views for both players of ``game`` (player i first)."""
    view_i = AgentView(
        game.a,
        game.b_i,
        game.b_j,
        game.param_i,
        game.param_j,
        game.q_i,
        np.asarray(theta_true_i, dtype=float).reshape(-1),
    )
    view_j = AgentView(
        game.a,
        game.b_j,
        game.b_i,
        game.param_j,
        game.param_i,
        game.q_j,
        np.asarray(theta_true_j, dtype=float).reshape(-1),
    )
    return view_i, view_j


def reconstruct_gains_at(view, entry, theta_peer, theta_self, mode=MODE_PACE):
    """Gains implied by the current estimates at one history record.

    The peer gain solves the Riccati equation whose drift is shifted by the
    stored own-gain feedback (in ``peer-optimal`` mode that stored matrix is
    the agent's actual policy gain at the record time) with the estimated
    peer cost.  In full mode the agent's own gain as the peer would predict
    it is reconstructed the same way with the roles mirrored; the expert-peer
    mode skips it.
    """
    q_peer = view.param_peer.to_q(theta_peer)
    drift_peer = view.a - view.b_self @ (view.b_self.T @ entry.p_self_hat)
    p_peer = riccati.solve_are(riccati.AreSpec(drift_peer, view.b_peer, q_peer))
    if mode == MODE_PEER_OPTIMAL:
        return p_peer.p, None
    q_self = view.param_self.to_q(theta_self)
    drift_self = view.a - view.b_peer @ (view.b_peer.T @ entry.p_peer_hat)
    p_self = riccati.solve_are(riccati.AreSpec(drift_self, view.b_self, q_self))
    return p_peer.p, p_self.p


def predict_trajectories(view, entries, p_peer_per_entry, p_self_per_entry, dt, substeps=1):
    """Replay the window: predicted states and own-control error trajectory.

    The prediction starts at the first recorded state and integrates the
    recorded own controls together with the peer controls implied by the
    reconstructed peer gains (evaluated at the observed states, held over
    each segment).  The error trajectory starts at zero and is forced by the
    gap between the recorded own controls and the own controls the peer
    would predict.  With ``p_self_per_entry=None`` the error trajectory is
    identically zero.
    """
    entries = list(entries)
    xs = np.stack([e.x for e in entries])
    us = np.stack([e.u_self for e in entries])
    p_peer = np.stack([np.asarray(p) for p in p_peer_per_entry])
    uhat_peer = -np.einsum("nm,knj,kj->km", view.b_peer, p_peer, xs)
    if p_self_per_entry is None:
        uhat_self = None
    else:
        p_self = np.stack([np.asarray(p) for p in p_self_per_entry])
        uhat_self = -np.einsum("nm,knj,kj->km", view.b_self, p_self, xs)
    r_step, s_step = lqgame.rk4_step_matrices(view.a, dt, substeps)
    return _replay(view, xs, us, uhat_peer, uhat_self, r_step, s_step)


def _replay(view, xs, us, uhat_peer, uhat_self, r_step, s_step):
    n_pts, n = xs.shape
    xhat = np.empty_like(xs)
    err = np.zeros_like(xs)
    xhat[0] = xs[0]
    forcing_x = us @ view.b_self.T + uhat_peer @ view.b_peer.T
    if uhat_self is not None:
        forcing_e = (us - uhat_self) @ view.b_self.T
    for k in range(n_pts - 1):
        xhat[k + 1] = r_step @ xhat[k] + s_step @ forcing_x[k]
        if uhat_self is not None:
            err[k + 1] = r_step @ err[k] + s_step @ forcing_e[k]
    if not (np.all(np.isfinite(xhat)) and np.all(np.isfinite(err))):
        raise NonFiniteState("replayed trajectory became non-finite")
    return xhat, err


def compute_losses(xs, xhat, err):
    """Mean squared prediction error and mean squared own-control error."""
    xs = np.asarray(xs, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    err = np.asarray(err, dtype=float)
    if xs.shape != xhat.shape or xs.shape[0] != err.shape[0]:
        raise DimensionMismatch("loss series must share the window length")
    l_self = float(np.mean(np.sum((xs - xhat) ** 2, axis=1)))
    l_peer = float(np.mean(np.sum(err**2, axis=1)))
    return l_self, l_peer


@dataclass
class _Evaluation:
    p_peer: np.ndarray
    p_self: np.ndarray | None
    xhat: np.ndarray
    err: np.ndarray
    loss_self: float
    loss_peer: float
    grad_peer: np.ndarray | None
    grad_self: np.ndarray | None


def _scan_variational(r_step, s_step, forcing):
    """Accumulate the window integrator over stacked parameter directions.

    ``forcing`` has shape (N, d, n); the result dz has the same shape with
    dz[0] = 0 and dz[k+1] = dz[k] R^T + forcing[k] S^T.
    """
    out = np.zeros_like(forcing)
    rt = r_step.T
    st = s_step.T
    for k in range(forcing.shape[0] - 1):
        out[k + 1] = out[k] @ rt + forcing[k] @ st
    return out


def _evaluate(view, entries, theta_peer, theta_self, mode, r_step, s_step, *, cache=None, want_gradients=True):
    """Replay, score and (optionally) differentiate one belief configuration."""
    entries = list(entries)
    n_pts = len(entries)
    xs = np.stack([e.x for e in entries])
    us = np.stack([e.u_self for e in entries])
    stored_self = np.stack([e.p_self_hat for e in entries])
    stored_peer = np.stack([e.p_peer_hat for e in entries])

    q_peer = view.param_peer.to_q(theta_peer)
    ss_self = view.b_self @ view.b_self.T
    ss_peer = view.b_peer @ view.b_peer.T

    def warm(kind, fallback):
        if cache is None:
            return fallback
        out = fallback.copy()
        for idx, e in enumerate(entries):
            hit = cache.get((kind, e.tau))
            if hit is not None:
                out[idx] = hit
        return out

    drift_peer = view.a - np.matmul(ss_self, stored_self)
    p_peer, _ = riccati.solve_are_batch(
        drift_peer, view.b_peer, q_peer, p_init=warm("peer", stored_peer)
    )
    uhat_peer = -np.einsum("nm,knj,kj->km", view.b_peer, p_peer, xs)

    p_self = None
    uhat_self = None
    if mode == MODE_PACE:
        q_self = view.param_self.to_q(theta_self)
        drift_self = view.a - np.matmul(ss_peer, stored_peer)
        p_self, _ = riccati.solve_are_batch(
            drift_self, view.b_self, q_self, p_init=warm("self", stored_self)
        )
        uhat_self = -np.einsum("nm,knj,kj->km", view.b_self, p_self, xs)

    if cache is not None:
        for idx, e in enumerate(entries):
            cache[("peer", e.tau)] = p_peer[idx]
            if p_self is not None:
                cache[("self", e.tau)] = p_self[idx]

    xhat, err = _replay(view, xs, us, uhat_peer, uhat_self, r_step, s_step)
    loss_self, loss_peer = compute_losses(xs, xhat, err)

    grad_peer = None
    grad_self = None
    if want_gradients:
        dq_peer = np.stack([view.param_peer.dq(i) for i in range(view.param_peer.dim)])
        a_cl_peer = drift_peer - np.matmul(ss_peer, p_peer)
        dp_peer = riccati.sensitivity_batch(a_cl_peer, dq_peer)
        duhat_peer = -np.einsum("nm,kdnj,kj->kdm", view.b_peer, dp_peer, xs)
        forcing = np.einsum("nm,kdm->kdn", view.b_peer, duhat_peer)
        dxhat = _scan_variational(r_step, s_step, forcing)
        grad_peer = (-2.0 / n_pts) * np.einsum("kn,kdn->d", xs - xhat, dxhat)
        if mode == MODE_PACE:
            dq_self = np.stack(
                [view.param_self.dq(i) for i in range(view.param_self.dim)]
            )
            a_cl_self = drift_self - np.matmul(ss_self, p_self)
            dp_self = riccati.sensitivity_batch(a_cl_self, dq_self)
            duhat_self = -np.einsum("nm,kdnj,kj->kdm", view.b_self, dp_self, xs)
            forcing_e = -np.einsum("nm,kdm->kdn", view.b_self, duhat_self)
            derr = _scan_variational(r_step, s_step, forcing_e)
            grad_self = (2.0 / n_pts) * np.einsum("kn,kdn->d", err, derr)

    return _Evaluation(p_peer, p_self, xhat, err, loss_self, loss_peer, grad_peer, grad_self)


def compute_gradients(view, stack, beliefs, config, dt, substeps=1):
    """Gradients of the two window losses with respect to both estimates.

    Returns ``(d loss_self / d theta_peer, d loss_peer / d theta_self)``;
    the second entry is ``None`` in ``peer-optimal`` mode.
    """
    r_step, s_step = lqgame.rk4_step_matrices(view.a, dt, substeps)
    ev = _evaluate(
        view,
        stack,
        beliefs.theta_peer,
        beliefs.theta_self,
        config.mode,
        r_step,
        s_step,
    )
    return ev.grad_peer, ev.grad_self


def belief_step(view, stack, beliefs, config, dt, substeps=1, *, cache=None, events=None):
    """One projected-gradient update of both estimates plus gain prediction.

    On a solver failure inside the replay the whole update is rejected (the
    estimates and predicted pair are kept).  On a failed coupled solve after
    a successful gradient step the new estimates are kept but the previous
    predicted gain pair is retained; both cases are appended to ``events``.
    """
    if events is None:
        events = []
    r_step, s_step = lqgame.rk4_step_matrices(view.a, dt, substeps)
    try:
        ev = _evaluate(
            view,
            stack,
            beliefs.theta_peer,
            beliefs.theta_self,
            config.mode,
            r_step,
            s_step,
            cache=cache,
        )
    except _SOLVER_FAILURES as exc:
        events.append(f"belief update rejected: {exc}")
        return beliefs, events

    theta_peer = view.param_peer.project(
        beliefs.theta_peer - config.alpha * ev.grad_peer, epsilon_pd=config.epsilon_pd
    )
    if config.mode == MODE_PACE:
        theta_self = view.param_self.project(
            beliefs.theta_self - config.alpha * ev.grad_self,
            epsilon_pd=config.epsilon_pd,
        )
    else:
        theta_self = view.theta_self_true.copy()

    try:
        pair = riccati.solve_coupled_are(
            view.a,
            view.b_self,
            view.b_peer,
            view.param_self.to_q(theta_self),
            view.param_peer.to_q(theta_peer),
            tol=config.coupled_tol,
            max_iter=config.coupled_max_iter,
            init=(beliefs.p_self_hat, beliefs.p_peer_hat),
        )
        p_self_hat, p_peer_hat = pair.p_i.p, pair.p_j.p
    except (NoConvergence, *_SOLVER_FAILURES) as exc:
        events.append(f"coupled prediction failed, gain pair retained: {exc}")
        p_self_hat, p_peer_hat = beliefs.p_self_hat, beliefs.p_peer_hat

    return BeliefState(theta_peer, theta_self, p_self_hat, p_peer_hat), events


def policy_gain(view, p_peer_hat, *, p_init=None, tol=riccati.ARE_RESIDUAL_TOL):
    """Own stabilizing gain against the currently predicted peer gain.

    Solves the agent's Riccati equation with its true state cost and the
    predicted peer feedback folded into the drift.
    """
    drift = view.a - view.b_peer @ (view.b_peer.T @ np.asarray(p_peer_hat, dtype=float))
    spec = riccati.AreSpec(drift, view.b_self, view.q_self_true)
    return riccati.solve_are(spec, tol=tol, p_init=p_init)


@dataclass
class SpectrumDiagnostic:
    """Eigenvalues of the estimated update-map Jacobian and the step bound."""

    eigenvalues: np.ndarray
    alpha_max: float
    finite: bool


def update_spectrum_diagnostic(view, stack, beliefs, config, dt, substeps=1, h=SPECTRUM_FD_STEP):
    """Estimate the gradient-map Jacobian spectrum at the current beliefs.

    The Jacobian of ``theta -> gradient(theta)`` is estimated by central
    finite differences over the stacked parameter vector (peer estimates
    first, own-model estimates second in full mode), symmetrized, and used to
    report the largest admissible constant learning rate ``2 / lambda_max``.
    A window with no excitation yields a zero matrix and an infinite bound.
    """
    r_step, s_step = lqgame.rk4_step_matrices(view.a, dt, substeps)
    d_peer = view.param_peer.dim
    with_self = config.mode == MODE_PACE
    d_self = view.param_self.dim if with_self else 0

    def grad_at(theta_peer, theta_self):
        ev = _evaluate(view, stack, theta_peer, theta_self, config.mode, r_step, s_step)
        if with_self:
            return np.concatenate([ev.grad_peer, ev.grad_self])
        return ev.grad_peer

    dim = d_peer + d_self
    jac = np.zeros((dim, dim))
    base_peer = np.asarray(beliefs.theta_peer, dtype=float)
    base_self = np.asarray(beliefs.theta_self, dtype=float)
    for k in range(dim):
        dp = np.zeros(d_peer)
        ds = np.zeros(d_self) if with_self else np.zeros(0)
        if k < d_peer:
            dp[k] = h
        else:
            ds[k - d_peer] = h
        hi = grad_at(base_peer + dp, base_self + ds if with_self else base_self)
        lo = grad_at(base_peer - dp, base_self - ds if with_self else base_self)
        jac[:, k] = (hi - lo) / (2.0 * h)

    finite = bool(np.all(np.isfinite(jac)))
    sym = (jac + jac.T) / 2.0
    if finite:
        eigenvalues = np.linalg.eigvalsh(sym)
        lam_max = float(eigenvalues[-1])
        alpha_max = 2.0 / lam_max if lam_max > 0.0 else np.inf
    else:
        eigenvalues = np.full(dim, np.nan)
        alpha_max = np.nan
    return SpectrumDiagnostic(eigenvalues, alpha_max, finite)


class PaceLearner:
    """Single agent running the online estimation loop.

    Owns the mutable history stack, belief state, policy gain and the
    reconstruction warm-start cache.  Distinct learners share nothing.
    """

    def __init__(self, view, config, theta_peer0, theta_self0, dt, substeps=1):
        self.view = view
        self.config = config
        self.dt = float(dt)
        self.substeps = int(substeps)
        theta_peer = view.param_peer.project(
            np.asarray(theta_peer0, dtype=float).reshape(-1), epsilon_pd=config.epsilon_pd
        )
        if config.mode == MODE_PEER_OPTIMAL:
            theta_self = view.theta_self_true.copy()
        else:
            theta_self = view.param_self.project(
                np.asarray(theta_self0, dtype=float).reshape(-1),
                epsilon_pd=config.epsilon_pd,
            )
        try:
            pair = riccati.solve_coupled_are(
                view.a,
                view.b_self,
                view.b_peer,
                view.param_self.to_q(theta_self),
                view.param_peer.to_q(theta_peer),
                tol=config.coupled_tol,
                max_iter=config.coupled_max_iter,
            )
        except (NoConvergence, *_SOLVER_FAILURES) as exc:
            raise InfeasibleInitialization(
                f"initial coupled gain prediction failed: {exc}"
            ) from exc
        self.beliefs = BeliefState(theta_peer, theta_self, pair.p_i.p, pair.p_j.p)
        try:
            self.policy = policy_gain(view, self.beliefs.p_peer_hat)
        except NoStabilizingSolution as exc:
            raise InfeasibleInitialization(f"initial policy gain failed: {exc}") from exc
        self.stack = HistoryStack(config.capacity)
        self.cache = {}
        self._rs = lqgame.rk4_step_matrices(view.a, dt, substeps)

    def act(self, x):
        """Control applied at the observed state under the current policy."""
        return lqgame.feedback_control(self.view.b_self, self.policy.p, x)

    def predicted_peer_control(self, x):
        """Peer control implied by the currently predicted peer gain."""
        return lqgame.feedback_control(self.view.b_peer, self.beliefs.p_peer_hat, x)

    def record(self, tau, x, u_self):
        self.stack.record(
            HistoryEntry(tau, x, u_self, self.beliefs.p_self_hat, self.beliefs.p_peer_hat)
        )
        live = set(self.stack.taus())
        if len(self.cache) > 2 * len(live):
            self.cache = {k: v for k, v in self.cache.items() if k[1] in live}

    def learn(self):
        """Belief update followed by the policy refresh; returns event log."""
        events = []
        self.beliefs, events = belief_step(
            self.view,
            self.stack,
            self.beliefs,
            self.config,
            self.dt,
            self.substeps,
            cache=self.cache,
            events=events,
        )
        self.policy = policy_gain(
            self.view, self.beliefs.p_peer_hat, p_init=self.policy.p
        )
        return events
