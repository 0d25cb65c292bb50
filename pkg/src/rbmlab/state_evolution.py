"""Deterministic k x k recursion tracking the message-passing iteration.

The weight-space denoiser is linear, so its half of the sweep is closed form;
the sample-space half takes expectations of the nonlinear g denoiser over a
rank-r signal plus Gaussian field, evaluated either by Monte Carlo (general
states) or per-unit Gauss-Hermite quadrature (diagonal states with separable
priors, where every matrix stays exactly diagonal).

The g-field noise enters through the symmetric square root of its covariance
in both halves of the sweep.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng as _rng
from .effective_model import EffectiveModel, grad_eta2
from .errors import SolverError, ValidationError
from .numutil import gauss_normal_grid, sym_sqrt, symmetrize
from .spiked_data import SpikePrior

_DIAG_TOL = 1e-10


@dataclass(frozen=True)
class SeProblem:
    """Model plus data-law parameters entering the recursion."""

    model: EffectiveModel
    prior_u: SpikePrior
    prior_w: SpikePrior
    Lambda: np.ndarray            # (r,) SNR diagonal
    theta1: float = 1.0           # nonlinearity information coefficient

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.Lambda, dtype=float))
        if np.any(lam < 0):
            raise ValidationError("SNR entries must be >= 0")
        object.__setattr__(self, "Lambda", lam)
        if self.prior_u.r != self.r or self.prior_w.r != self.r:
            raise ValidationError("prior dimension must match len(Lambda)")

    @property
    def r(self) -> int:
        return self.Lambda.shape[0]

    @property
    def k(self) -> int:
        return self.model.k

    def gamma(self) -> np.ndarray:
        """Effective SNR sqrt(alpha)*Lambda*theta1, zero-padded to (k, k)."""
        g = np.zeros((self.k, self.k))
        m = min(self.k, self.r)
        g[:m, :m] = np.diag(np.sqrt(self.model.alpha) * self.Lambda[:m] * self.theta1)
        return g

    def w_second_moment(self) -> np.ndarray:
        """E[W W^T] for the padded spike vector, (k, k) diagonal."""
        out = np.zeros((self.k, self.k))
        m = min(self.k, self.r)
        out[:m, :m] = np.eye(m) * self.prior_w.second_moment()
        return out

    def u_second_moment(self) -> np.ndarray:
        out = np.zeros((self.k, self.k))
        m = min(self.k, self.r)
        out[:m, :m] = np.eye(m) * self.prior_u.second_moment()
        return out


@dataclass(frozen=True)
class SeState:
    """Order parameters entering one sweep.

    (M, Sigma) describe the weight-side field at time t; Q_hat_bar and C_bar
    are the Lagrange matrix and Onsager coefficient the sweep will consume,
    i.e. C_bar holds the previous sweep's value.  The barred quantities are
    filled by the sweep that produced the state (zeros at init).
    """

    M: np.ndarray
    Sigma: np.ndarray
    Q_hat_bar: np.ndarray
    C_bar: np.ndarray
    M_bar: np.ndarray
    Sigma_bar: np.ndarray
    B_bar: np.ndarray
    Q_bar: np.ndarray
    t: int = 0


def se_init(problem: SeProblem, m0: float = 0.0, sigma0: float = 1.0,
            overlap_convention: bool = True) -> SeState:
    """State matching an informed init field with initial overlap m0.

    With overlap_convention the signal coefficient is scaled so the overlap of
    the init field itself is exactly m0 (matching the algorithm's informed
    init); otherwise m0 is the raw coefficient.
    """
    k = problem.k
    M = np.zeros((k, k))
    m = min(k, problem.r)
    coeff = m0
    if overlap_convention and 0.0 <= m0 < 1.0:
        coeff = sigma0 * m0 / np.sqrt(1.0 - m0 * m0)
    M[:m, :m] = coeff * np.eye(m)
    z = np.zeros((k, k))
    return SeState(M=M, Sigma=sigma0 ** 2 * np.eye(k), Q_hat_bar=0.5 * np.eye(k),
                   C_bar=z.copy(), M_bar=z.copy(), Sigma_bar=z.copy(),
                   B_bar=z.copy(), Q_bar=z.copy(), t=0)


def _f_moments(problem: SeProblem, state: SeState):
    """Closed-form weight-side statistics: the denoiser is linear."""
    alpha = problem.model.alpha
    Omega = 2.0 * state.Q_hat_bar + state.C_bar
    Omega_inv = np.linalg.inv(Omega)
    R_w = problem.w_second_moment()
    EfW = -Omega_inv @ state.M @ R_w                      # E[f W^T]
    M_bar = EfW @ problem.gamma() / alpha
    Sigma_bar = Omega_inv @ (state.M @ R_w @ state.M.T + state.Sigma) @ Omega_inv.T / alpha
    B_bar = -Omega_inv / alpha
    return EfW, M_bar, symmetrize(Sigma_bar), B_bar


# --- expectation engines ------------------------------------------------------


@dataclass
class MonteCarloEngine:
    """Sampled g-expectations with a fixed (U, G) pool (common random numbers)."""

    n_samples: int = 1_000_000
    seed: int = 0
    _pool: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_samples < 10_000:
            raise ValidationError("Monte Carlo engine needs at least 1e4 samples")

    def _draws(self, problem: SeProblem):
        if self._pool is None:
            k, r = problem.k, problem.r
            g = np.random.Generator(np.random.Philox(key=np.uint64(self.seed)))
            U = np.zeros((self.n_samples, k))
            U[:, :min(k, r)] = _prior_draws(problem.prior_u, g, self.n_samples)[:, :min(k, r)]
            G = g.standard_normal((self.n_samples, k))
            self._pool = (U, G)
        return self._pool

    def g_moments(self, problem: SeProblem, M_bar, Sigma_bar, B_bar):
        from .amp import solve_g, g_jacobian_rows
        U, G = self._draws(problem)
        root, _ = sym_sqrt(Sigma_bar, floor=0.0)
        Y = U @ M_bar.T + G @ root.T
        gvals, H = solve_g(Y, B_bar, problem.model)
        n = self.n_samples
        EgU = gvals.T @ U / n
        Egg = gvals.T @ gvals / n
        C = g_jacobian_rows(H, B_bar, problem.model).mean(axis=0)
        return EgU, Egg, C


@dataclass
class GaussHermiteEngine:
    """Per-unit quadrature; requires diagonal states and separable priors.

    The Gaussian direction uses a composite Gauss-Legendre rule: the implicit
    denoiser develops a narrow interior layer near the recovery threshold
    that plain Gauss-Hermite resolves very slowly.
    """

    nodes: int = 800

    def g_moments(self, problem: SeProblem, M_bar, Sigma_bar, B_bar):
        model = problem.model
        prior = model.hidden_prior
        if not prior.separable_units:
            raise ValidationError("quadrature engine needs a separable hidden prior")
        for name, a in (("M_bar", M_bar), ("Sigma_bar", Sigma_bar), ("B_bar", B_bar)):
            if np.max(np.abs(a - np.diag(np.diag(a)))) > _DIAG_TOL * max(1.0, np.max(np.abs(a))):
                raise ValidationError(f"quadrature engine needs diagonal {name}")
        k, r = problem.k, problem.r
        z, wz = gauss_normal_grid(self.nodes)
        up, uw = problem.prior_u.support()
        EgU = np.zeros((k, k))
        Egg = np.zeros((k, k))
        C = np.zeros((k, k))
        for a in range(k):
            if a < r:
                upts, uwts = up, uw
            else:
                upts, uwts = np.array([0.0]), np.array([1.0])
            yy = M_bar[a, a] * upts[:, None] + np.sqrt(max(Sigma_bar[a, a], 0.0)) * z[None, :]
            ww = uwts[:, None] * wz[None, :]
            u, uprime = _g_scalar(yy.ravel(), B_bar[a, a], prior.unit_points,
                                  prior.unit_weights, model.alpha)
            u = u.reshape(yy.shape)
            uprime = uprime.reshape(yy.shape)
            EgU[a, a] = np.sum(ww * u * upts[:, None])
            Egg[a, a] = np.sum(ww * u * u)
            C[a, a] = np.sum(ww * uprime)
        return EgU, Egg, C


def _prior_draws(prior: SpikePrior, g: np.random.Generator, n: int) -> np.ndarray:
    if prior.kind == "rademacher":
        return g.choice([-1.0, 1.0], size=(n, prior.r))
    if prior.kind == "gaussian":
        return np.sqrt(prior.variance) * g.standard_normal((n, prior.r))
    return g.choice(prior.points, size=(n, prior.r), p=prior.weights)


def _unit_eta1_prime(x, up, uw, alpha):
    """d/dx log sum_h w_h exp(sqrt(alpha) x h) for a scalar unit, stable."""
    sa = np.sqrt(alpha)
    logits = sa * x[..., None] * up + np.log(uw)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    mean = p @ up
    second = p @ (up ** 2)
    return sa * mean, alpha * (second - mean ** 2)


def _g_scalar(y, b, up, uw, alpha, iters: int = 90):
    """Bisection solve of u + eta1'(b u + y)/alpha = 0 plus du/dy, vectorized."""
    hmax = float(np.max(np.abs(up)))
    bound = hmax / np.sqrt(alpha) + 1e-12
    lo = np.full_like(y, -bound)
    hi = np.full_like(y, bound)

    def psi(u):
        d1, _ = _unit_eta1_prime(b * u + y, up, uw, alpha)
        return u + d1 / alpha

    flo = psi(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = psi(mid)
        left = fm * flo <= 0
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
        flo = np.where(left, flo, fm)
    u = 0.5 * (lo + hi)
    _, d2 = _unit_eta1_prime(b * u + y, up, uw, alpha)
    s = d2 / alpha
    uprime = -s / (1.0 + s * b)
    return u, uprime


# --- the sweep, runs, and overlap ----------------------------------------------


def se_step(problem: SeProblem, state: SeState, engine, zeta: float = 0.7) -> SeState:
    """One full sweep of the recursion; zeta damps the Lagrange matrix only."""
    _, M_bar, Sigma_bar, B_bar = _f_moments(problem, state)
    Q_bar = problem.model.alpha * Sigma_bar
    Q_hat_next = zeta * state.Q_hat_bar + (1.0 - zeta) * grad_eta2(
        symmetrize(Q_bar), None, problem.model)
    EgU, Egg, C_next = engine.g_moments(problem, M_bar, Sigma_bar, B_bar)
    M_next = EgU @ problem.gamma()
    return SeState(M=M_next, Sigma=symmetrize(Egg), Q_hat_bar=Q_hat_next,
                   C_bar=C_next, M_bar=M_bar, Sigma_bar=Sigma_bar, B_bar=B_bar,
                   Q_bar=Q_bar, t=state.t + 1)


def se_overlap(problem: SeProblem, state: SeState) -> np.ndarray:
    """Predicted |overlap| matrix (k, r) of the weight iterate this state produces."""
    EfW, _, Sigma_bar, _ = _f_moments(problem, state)
    Eff = problem.model.alpha * Sigma_bar
    var_f = np.clip(np.diag(Eff), 0.0, None)
    var_w = problem.prior_w.second_moment()
    denom = np.sqrt(np.outer(var_f, np.full(problem.r, var_w)))
    out = np.zeros((problem.k, problem.r))
    nz = denom > 0
    out[nz] = np.abs(EfW[:, :problem.r][nz]) / denom[nz]
    return out


@dataclass
class SeTrace:
    states: list
    overlaps: np.ndarray          # (T, k, r)
    converged: bool
    cycle_detected: bool
    n_steps: int

    @property
    def final(self) -> SeState:
        return self.states[-1]


def _state_gap(a: SeState, b: SeState) -> float:
    return max(np.max(np.abs(a.M - b.M)), np.max(np.abs(a.Sigma - b.Sigma)),
               np.max(np.abs(a.Q_hat_bar - b.Q_hat_bar)),
               np.max(np.abs(a.C_bar - b.C_bar)))


def se_run(problem: SeProblem, init: SeState, engine, T: int, tol: float = 1e-8,
           zeta: float = 0.7, state_damping: float = 0.0,
           fp_window: int = 3) -> SeTrace:
    """Iterate the sweep to T steps or a fixed point.

    state_damping relaxes (M, Sigma, C_bar) toward the sweep output; it
    preserves fixed points but changes the trajectory, so tracking comparisons
    against the algorithm must run undamped.  A period-2 cycle (state matches
    two sweeps ago but not one) stops the run with cycle_detected set.
    """
    if T < 1:
        raise ValidationError("T must be >= 1")
    states = [init]
    overlaps = []
    small_steps = 0
    converged = False
    cycle = False
    state = init
    for t in range(T):
        # the pre-sweep state is the one whose weight iterate this sweep emits
        overlaps.append(se_overlap(problem, state))
        nxt = se_step(problem, state, engine, zeta=zeta)
        if state_damping > 0.0:
            delta = state_damping
            nxt = replace(nxt,
                          M=(1 - delta) * state.M + delta * nxt.M,
                          Sigma=(1 - delta) * state.Sigma + delta * nxt.Sigma,
                          C_bar=(1 - delta) * state.C_bar + delta * nxt.C_bar)
        states.append(nxt)
        gap = _state_gap(nxt, state)
        if len(states) >= 3:
            gap2 = _state_gap(nxt, states[-3])
            if gap2 < tol and gap > 10 * tol:
                cycle = True
                state = nxt
                break
        small_steps = small_steps + 1 if gap < tol else 0
        state = nxt
        if small_steps >= fp_window:
            converged = True
            break
    return SeTrace(states=states, overlaps=np.array(overlaps), converged=converged,
                   cycle_detected=cycle, n_steps=len(overlaps))


def se_fixed_point(problem: SeProblem, engine=None, zeta: float = 0.7,
                   m0: float = 2.0, sigma0: float = 1.0, damping: float = 0.35,
                   T: int = 4000, tol: float = 1e-11) -> SeTrace:
    """Damped run from a strongly informed start.

    The strong start selects the informed (stable) branch when several
    stationary points coexist near the recovery threshold; damping suppresses
    the period-2 oscillation of the raw sweep there.
    """
    engine = engine or GaussHermiteEngine()
    trace = se_run(problem, se_init(problem, m0=m0, sigma0=sigma0), engine,
                   T=T, tol=tol, zeta=zeta, state_damping=damping)
    if not trace.converged:
        raise SolverError("state-evolution fixed point did not converge "
                          f"in {T} damped sweeps")
    return trace


def k1_summary(problem: SeProblem, state: SeState) -> dict:
    """Scalar fixed-point summary (k = 1 only) for the saddle warm start."""
    if problem.k != 1:
        raise ValidationError("summary only defined for k = 1")
    m = float(state.M[0, 0])
    sig = float(state.Sigma[0, 0])
    cbar = float(state.C_bar[0, 0])
    omega = float(2.0 * state.Q_hat_bar[0, 0] + cbar)
    return {"m": m, "sigma": sig, "c_bar": cbar, "omega": omega,
            "overlap": abs(m) / np.sqrt(m * m + sig)}


# --- recovery threshold ---------------------------------------------------------


def bbp_threshold(alpha: float) -> float:
    """SNR below which the zero fixed point is stable: alpha**(-1/4)."""
    if alpha <= 0:
        raise ValidationError("alpha must be positive")
    return alpha ** -0.25


def linearized_se_gain(alpha: float, Lambda, theta1: float = 1.0) -> float:
    """Per-sweep spectral gain of the linearized recursion: max_a alpha*(lam_a*theta1)^4."""
    lam = np.atleast_1d(np.asarray(Lambda, dtype=float))
    return float(alpha * np.max((lam * theta1) ** 4))


def weak_recovery(alpha: float, Lambda, theta1: float = 1.0) -> bool:
    """True when the zero fixed point is unstable (strict inequality)."""
    return linearized_se_gain(alpha, Lambda, theta1) > 1.0
