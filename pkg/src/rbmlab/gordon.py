"""Rank-1 characterization of the global optimum via a scalar saddle system.

Works in the minimization convention: the scalar pair (eta1, eta2) represents
the negated per-dimension objective, e.g. for sign hidden units
eta1(x) = -log cosh(sqrt(alpha) x)/alpha and eta2(w) = alpha w^2 / 2, so that
the optimum value A satisfies A = -objective / (alpha d) at the maximizer.

Eight scalars (m, q, p, tau, kappa, nu, chi, phi) solve the stationarity
system of the potential; expectations couple two scalar proximal maps, one
for eta1 on the sample side and one for eta2 plus the norm multiplier on the
weight side.  At the relevant solution chi is negative (it equals alpha times
the sample-side Onsager coefficient of the matching message-passing fixed
point), so the weight-side envelope carries a negative parameter; it stays
well posed because the eta2 curvature dominates.

The stationarity equation in q is implemented with the sign obtained by
differentiating the potential, E[G (x1 - P1)] = chi q tau / (alpha kappa);
this is the version consistent with positivity of (q, tau, kappa) and with
the fixed point of the message-passing recursion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError, SolverError, ValidationError
from .numutil import gauss_normal_grid, log_cosh, sech2
from .spiked_data import SpikePrior


# --- scalar objective pairs -----------------------------------------------------


@dataclass(frozen=True)
class ScalarObjectivePair:
    """Scalar maps defining the rank-1 problem, with analytic derivatives.

    eta1(x); eta2(w, p) where p is the norm statistic ||w||_r^r / d;
    r_norm is the exponent of the norm constraint (2 by default).
    """

    eta1: Callable
    d_eta1: Callable
    dd_eta1: Callable
    eta2: Callable                 # (w, p) -> value
    d_eta2_w: Callable
    dd_eta2_w: Callable
    d_eta2_p: Callable
    r_norm: float = 2.0
    d1_bound: float = np.inf       # sup |eta1'|, used to bracket the prox


def rbm_pair(alpha: float, unit_points=None, unit_weights=None) -> ScalarObjectivePair:
    """Minimization-convention pair for a one-hidden-unit model.

    Default sign units give eta1(x) = -log cosh(sqrt(alpha) x)/alpha and
    eta2(w) = alpha w^2/2; general finite unit supports are handled through
    the same log-partition form.
    """
    sa = np.sqrt(alpha)
    if unit_points is None:
        e1 = lambda x: -log_cosh(sa * np.asarray(x)) / alpha
        d1 = lambda x: -np.tanh(sa * np.asarray(x)) / sa
        dd1 = lambda x: -sech2(sa * np.asarray(x))
        bound = 1.0 / sa
    else:
        up = np.asarray(unit_points, dtype=float)
        uw = np.asarray(unit_weights, dtype=float)

        def _tilt(x):
            logits = sa * np.asarray(x)[..., None] * up + np.log(uw)
            mx = logits.max(axis=-1, keepdims=True)
            p = np.exp(logits - mx)
            z = p.sum(axis=-1)
            return p / z[..., None], (np.log(z) + mx[..., 0])

        def e1(x):
            _, logz = _tilt(x)
            return -logz / alpha

        def d1(x):
            p, _ = _tilt(x)
            return -(p @ up) / sa

        def dd1(x):
            p, _ = _tilt(x)
            mean = p @ up
            return -(p @ up ** 2 - mean ** 2)

        bound = float(np.max(np.abs(up))) / sa
    return ScalarObjectivePair(
        eta1=e1, d_eta1=d1, dd_eta1=dd1,
        eta2=lambda w, p: 0.5 * alpha * np.asarray(w) ** 2,
        d_eta2_w=lambda w, p: alpha * np.asarray(w),
        dd_eta2_w=lambda w, p: alpha * np.ones_like(np.asarray(w)),
        d_eta2_p=lambda w, p: np.zeros_like(np.asarray(w)),
        r_norm=2.0, d1_bound=bound)


def quadratic_pair(a1: float, a2: float) -> ScalarObjectivePair:
    """eta1 = a1 x^2/2, eta2 = a2 w^2/2; closed-form everything, for tests."""
    return ScalarObjectivePair(
        eta1=lambda x: 0.5 * a1 * np.asarray(x) ** 2,
        d_eta1=lambda x: a1 * np.asarray(x),
        dd_eta1=lambda x: a1 * np.ones_like(np.asarray(x)),
        eta2=lambda w, p: 0.5 * a2 * np.asarray(w) ** 2,
        d_eta2_w=lambda w, p: a2 * np.asarray(w),
        dd_eta2_w=lambda w, p: a2 * np.ones_like(np.asarray(w)),
        d_eta2_p=lambda w, p: np.zeros_like(np.asarray(w)),
        r_norm=2.0, d1_bound=np.inf)


# --- scalar proximal machinery ---------------------------------------------------


def _bisect(fun, lo, hi, iters=90):
    flo = fun(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = fun(mid)
        left = fm * flo <= 0
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
        flo = np.where(left, flo, fm)
    return 0.5 * (lo + hi)


def _expand_bracket(fun, x, step0=1.0, max_doublings=60):
    """Symmetric expanding bracket around x until fun changes sign."""
    lo = x - step0
    hi = x + step0
    for _ in range(max_doublings):
        bad = fun(lo) * fun(hi) > 0
        if not np.any(bad):
            return lo, hi
        width = hi - lo
        lo = np.where(bad, lo - width, lo)
        hi = np.where(bad, hi + width, hi)
    raise NumericalError("prox bracket expansion failed; stationarity has no "
                         "sign change (curvature condition violated?)")


def prox_eta1(pair: ScalarObjectivePair, taup: float, x: np.ndarray) -> np.ndarray:
    """Stationary point of eta1(y) + (y - x)^2/(2 taup), vectorized.

    taup must be positive; eta1 may be weakly concave as long as
    1 + taup * eta1'' stays positive, which holds in the operating regime.
    """
    if not taup > 0:
        raise ValidationError("eta1 prox parameter must be positive")
    x = np.asarray(x, dtype=float)
    fun = lambda y: y - x + taup * pair.d_eta1(y)
    step = taup * pair.d1_bound if np.isfinite(pair.d1_bound) else 1.0
    lo, hi = _expand_bracket(fun, x, step0=max(step, 1e-3))
    return _bisect(fun, lo, hi)


def prox_eta2(pair: ScalarObjectivePair, chi: float, p: float, phi: float,
              x: np.ndarray) -> np.ndarray:
    """Stationary point of eta2(y, p) + phi |y|^r + chi (y - x)^2 / 2.

    chi may be negative; the combined curvature eta2'' + phi r(r-1)|y|^(r-2)
    + chi must stay positive for the point to be a minimizer of the envelope.
    """
    x = np.asarray(x, dtype=float)
    r = pair.r_norm

    def fun(y):
        pen = phi * r * np.sign(y) * np.abs(y) ** (r - 1) if phi != 0.0 else 0.0
        return pair.d_eta2_w(y, p) + pen + chi * (y - x)

    lo, hi = _expand_bracket(fun, x, step0=max(1.0, np.max(np.abs(x)) + 1.0))
    return _bisect(fun, lo, hi)


def prox_eta1_deriv(pair, taup, P):
    return 1.0 / (1.0 + taup * pair.dd_eta1(P))


def prox_eta2_deriv(pair, chi, p, phi, P):
    r = pair.r_norm
    pen = phi * r * (r - 1) * np.abs(P) ** (r - 2) if phi != 0.0 else 0.0
    return chi / (chi + pair.dd_eta2_w(P, p) + pen)


def moreau(f: Callable, tau: float, x: float, n_grid: int = 4097) -> tuple[float, float]:
    """Moreau envelope value and a minimizer of f(y) + (y - x)^2 / (2 tau).

    Derivative-free: expanding bracket, coarse grid, then golden-section
    refinement, so kinks (e.g. absolute values) are handled exactly.
    """
    if not tau > 0:
        raise ValidationError("tau must be positive")
    obj = lambda y: f(y) + (y - x) ** 2 / (2.0 * tau)
    radius = 1.0
    best = obj(x)
    for _ in range(80):
        if obj(x - radius) > best and obj(x + radius) > best:
            break
        best = min(best, obj(x - radius), obj(x + radius))
        radius *= 2.0
    ys = np.linspace(x - radius, x + radius, n_grid)
    vals = np.array([obj(y) for y in ys])
    i = int(np.argmin(vals))
    lo, hi = ys[max(i - 1, 0)], ys[min(i + 1, n_grid - 1)]
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = obj(c), obj(d)
    for _ in range(200):
        if abs(b - a) < 1e-13 * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = obj(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = obj(d)
    prox = 0.5 * (a + b)
    # guarded Newton polish on the stationarity; golden section alone bottoms
    # out near sqrt(eps) for smooth minima, and the guard keeps kinked f safe
    for _ in range(6):
        h = 1e-6 * max(1.0, abs(prox))
        d1 = (f(prox + h) - f(prox - h)) / (2 * h) + (prox - x) / tau
        d2 = (f(prox + h) - 2 * f(prox) + f(prox - h)) / (h * h) + 1.0 / tau
        if not np.isfinite(d1) or not np.isfinite(d2) or d2 <= 0:
            break
        cand = prox - d1 / d2
        if not (a - h <= cand <= b + h) or obj(cand) > obj(prox) + 1e-15:
            break
        prox = cand
    return float(obj(prox)), float(prox)


# --- the saddle system -----------------------------------------------------------


@dataclass
class SaddlePoint:
    m: float
    q: float
    p: float
    tau: float
    kappa: float
    nu: float
    chi: float
    phi: float

    def as_array(self):
        return np.array([self.m, self.q, self.p, self.tau, self.kappa,
                         self.nu, self.chi, self.phi])

    def overlap(self, rho: float = 1.0) -> float:
        """Predicted |overlap| of the global optimum: |m| / (sqrt(rho) q)."""
        return abs(self.m) / (np.sqrt(rho) * self.q)

    def to_dict(self):
        return {"m": self.m, "q": self.q, "p": self.p, "tau": self.tau,
                "kappa": self.kappa, "nu": self.nu, "chi": self.chi,
                "phi": self.phi}


COLD_START = SaddlePoint(m=0.1, q=1.0, p=1.0, tau=1.0, kappa=1.0, nu=0.1,
                         chi=1.0, phi=0.0)


@dataclass
class _Grids:
    u_pts: np.ndarray
    u_wts: np.ndarray
    w_pts: np.ndarray
    w_wts: np.ndarray
    g_pts: np.ndarray
    g_wts: np.ndarray

    @classmethod
    def build(cls, prior_u: SpikePrior, prior_w: SpikePrior, gh: int):
        up, uw = prior_u.support()
        wp, ww = prior_w.support()
        z, w = gauss_normal_grid(gh)
        return cls(up, uw, wp, ww, z, w)


def _eta1_side(pair, alpha, lam, m, q, taup, grids):
    """Expectations over x1 = lam m U + q G of the eta1 prox displacement."""
    U = grids.u_pts[:, None]
    G = grids.g_pts[None, :]
    wts = grids.u_wts[:, None] * grids.g_wts[None, :]
    x1 = lam * m * U + q * G
    P1 = prox_eta1(pair, taup, x1)
    disp = P1 - x1
    P1p = prox_eta1_deriv(pair, taup, P1)
    return {
        "e_u": float(np.sum(wts * U * disp)),
        "e_2": float(np.sum(wts * disp ** 2)),
        "e_p1prime": float(np.sum(wts * P1p)),
        "e_eta1": float(np.sum(wts * pair.eta1(P1))),
        "e_disp2_for_env": float(np.sum(wts * disp ** 2)),
        "x1": x1, "P1": P1, "wts": wts,
    }


def _eta2_side(pair, nu, kappa, chi, p, phi, grids):
    """Expectations over x2 = (nu W + kappa H)/chi of the eta2 prox."""
    W = grids.w_pts[:, None]
    H = grids.g_pts[None, :]
    wts = grids.w_wts[:, None] * grids.g_wts[None, :]
    x2 = (nu * W + kappa * H) / chi
    P2 = prox_eta2(pair, chi, p, phi, x2)
    P2p = prox_eta2_deriv(pair, chi, p, phi, P2)
    r = pair.r_norm
    return {
        "e_wp": float(np.sum(wts * W * P2)),
        "e_22": float(np.sum(wts * P2 ** 2)),
        "e_hp": float(np.sum(wts * H * P2)),
        "e_pr": float(np.sum(wts * np.abs(P2) ** r)),
        "e_d2p": float(np.sum(wts * pair.d_eta2_p(P2, p))),
        "e_p2prime": float(np.sum(wts * P2p)),
        "e_eta2": float(np.sum(wts * pair.eta2(P2, p))),
        "x2": x2, "P2": P2, "wts": wts,
    }


def saddle_residuals(point: SaddlePoint, pair: ScalarObjectivePair, alpha: float,
                     lam: float, prior_u: SpikePrior, prior_w: SpikePrior,
                     gh: int = 800) -> np.ndarray:
    """The eight stationarity equations evaluated at `point` (zero at a solution).

    Order: d/d(nu, chi, kappa, m, tau, q, phi, p).
    """
    grids = _Grids.build(prior_u, prior_w, gh)
    return _residuals(point, pair, alpha, lam, grids)


def solve_saddle(pair: ScalarObjectivePair, alpha: float, lam: float,
                 prior_u: SpikePrior, prior_w: SpikePrior,
                 init: Optional[SaddlePoint] = None, tol: float = 1e-9,
                 damping: float = 0.45, max_sweeps: int = 10_000,
                 gh: int = 800) -> tuple[SaddlePoint, dict]:
    """Damped fixed-point iteration on the eight stationarity equations.

    Returns (point, info); info carries the residual vector, sweep count, and
    whether (q, tau) stayed positive and kappa nonnegative.
    """
    if lam < 0 or alpha <= 0:
        raise ValidationError("need lam >= 0 and alpha > 0")
    grids = _Grids.build(prior_u, prior_w, gh)
    pt = init or COLD_START
    m, q, p, tau, kap, nu, chi, phi = pt.as_array()
    G = grids.g_pts[None, :]

    for sweep in range(max_sweeps):
        taup = tau / kap
        s1 = _eta1_side(pair, alpha, lam, m, q, taup, grids)
        eg = float(np.sum(s1["wts"] * G * (s1["x1"] - s1["P1"])))
        ratio = kap / tau
        tau_n = np.sqrt(max(alpha * s1["e_2"], 1e-300))
        nu_n = lam * alpha * ratio * s1["e_u"]
        chi_n = alpha * ratio * eg / q

        s2 = _eta2_side(pair, nu_n, kap, chi_n, p, phi, grids)
        e_p2p = s2["e_p2prime"]
        if abs(e_p2p) < 1e-14:
            raise NumericalError("degenerate eta2 prox derivative")
        kap_n = tau_n * chi_n / e_p2p
        m_n = s2["e_wp"]
        q_n = np.sqrt(max(s2["e_22"], 1e-300))
        p_n = s2["e_pr"]
        phi_n = s2["e_d2p"]

        new = np.array([m_n, q_n, p_n, tau_n, kap_n, nu_n, chi_n, phi_n])
        old = np.array([m, q, p, tau, kap, nu, chi, phi])
        step = np.max(np.abs(new - old))
        m, q, p, tau, kap, nu, chi, phi = (1 - damping) * old + damping * new
        if step < 0.1 * tol:
            break
    point = SaddlePoint(m=m, q=q, p=p, tau=tau, kappa=kap, nu=nu, chi=chi, phi=phi)
    res = _residuals(point, pair, alpha, lam, grids)
    max_res = float(np.max(np.abs(res)))
    if max_res > tol:
        raise SolverError(f"saddle solver stalled after {sweep + 1} sweeps; "
                          f"max residual {max_res:.3e} (tol {tol:.1e})")
    info = {"residuals": res, "sweeps": sweep + 1,
            "cone_ok": bool(q > 0 and tau > 0 and kap >= 0)}
    return point, info


def _residuals(point, pair, alpha, lam, grids):
    m, q, p, tau, kap, nu, chi, phi = point.as_array()
    s1 = _eta1_side(pair, alpha, lam, m, q, tau / kap, grids)
    s2 = _eta2_side(pair, nu, kap, chi, p, phi, grids)
    G = grids.g_pts[None, :]
    eg = float(np.sum(s1["wts"] * G * (s1["x1"] - s1["P1"])))
    ratio = kap / tau
    return np.array([
        m - s2["e_wp"],
        q ** 2 - s2["e_22"],
        tau - s2["e_hp"],
        nu - lam * alpha * ratio * s1["e_u"],
        tau ** 2 - alpha * s1["e_2"],
        chi * q - alpha * ratio * eg,
        p - s2["e_pr"],
        phi - s2["e_d2p"],
    ])


def potential(point: SaddlePoint, pair: ScalarObjectivePair, alpha: float,
              lam: float, prior_u: SpikePrior, prior_w: SpikePrior,
              gh: int = 800) -> float:
    """Potential value at `point` (the sup-inf objective of the scalar system)."""
    grids = _Grids.build(prior_u, prior_w, gh)
    m, q, p, tau, kap, nu, chi, phi = point.as_array()
    rho = prior_w.second_moment()
    s1 = _eta1_side(pair, alpha, lam, m, q, tau / kap, grids)
    s2 = _eta2_side(pair, nu, kap, chi, p, phi, grids)
    env1 = s1["e_eta1"] + (kap / (2.0 * tau)) * s1["e_2"]
    disp2 = float(np.sum(s2["wts"] * (s2["P2"] - s2["x2"]) ** 2))
    env2 = s2["e_eta2"] + phi * s2["e_pr"] + 0.5 * chi * disp2
    val = (0.5 * kap * tau + alpha * env1 + env2
           - (nu ** 2 * rho + kap ** 2) / (2.0 * chi) + nu * m
           - 0.5 * chi * q ** 2 - phi * p)
    if not np.isfinite(val):
        raise NumericalError("potential evaluated to a non-finite value")
    return float(val)


def optimum_value(point: SaddlePoint, pair: ScalarObjectivePair, alpha: float,
                  lam: float, prior_u: SpikePrior, prior_w: SpikePrior,
                  gh: int = 800) -> float:
    """Simplified optimum alpha E[eta1(P1)] + E[eta2(P2, p)]; equals the
    potential at a solution of the stationarity system."""
    grids = _Grids.build(prior_u, prior_w, gh)
    s1 = _eta1_side(pair, alpha, lam, point.m, point.q, point.tau / point.kappa, grids)
    s2 = _eta2_side(pair, point.nu, point.kappa, point.chi, point.p, point.phi, grids)
    return float(alpha * s1["e_eta1"] + s2["e_eta2"])


def replicon_stability(point: SaddlePoint, pair: ScalarObjectivePair, alpha: float,
                       lam: float, prior_u: SpikePrior, prior_w: SpikePrior,
                       gh: int = 800) -> float:
    """Contraction factor of the two-sided prox linearization; < 1 certifies
    stability of the saddle (and convergence of the matching iteration).

    Value: alpha (kappa/(tau chi))^2 E[(P1' - 1)^2] E[(P2')^2] with P1' on the
    sample-side field and P2' on the weight-side field.
    """
    grids = _Grids.build(prior_u, prior_w, gh)
    m, q, p, tau, kap, nu, chi, phi = point.as_array()
    s1 = _eta1_side(pair, alpha, lam, m, q, tau / kap, grids)
    P1p = prox_eta1_deriv(pair, tau / kap, s1["P1"])
    e1 = float(np.sum(s1["wts"] * (P1p - 1.0) ** 2))
    s2 = _eta2_side(pair, nu, kap, chi, p, phi, grids)
    P2p = prox_eta2_deriv(pair, chi, p, phi, s2["P2"])
    e2 = float(np.sum(s2["wts"] * P2p ** 2))
    return float(alpha * (kap / (tau * chi)) ** 2 * e1 * e2)


def warm_start_from_se(m: float, sigma: float, omega: float, alpha: float) -> SaddlePoint:
    """Map a k=1 state-evolution fixed point onto the saddle coordinates.

    Exact for unit-variance spike priors: chi = alpha (omega - 1),
    kappa = sqrt(alpha sigma), nu = sqrt(alpha) m, tau = kappa / (alpha omega),
    m_saddle = m / (sqrt(alpha) omega), q = sqrt(m^2 + sigma) / (sqrt(alpha) omega).
    """
    kap = np.sqrt(alpha * sigma)
    q = np.sqrt(m * m + sigma) / (np.sqrt(alpha) * omega)
    return SaddlePoint(m=abs(m) / (np.sqrt(alpha) * omega), q=q, p=q * q,
                       tau=kap / (alpha * omega), kappa=kap,
                       nu=np.sqrt(alpha) * abs(m), chi=alpha * (omega - 1.0),
                       phi=0.0)
