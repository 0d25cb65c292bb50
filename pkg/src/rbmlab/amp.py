"""Iterative denoising with Onsager correction for the effective RBM objective.

One sweep alternates a linear weight-space denoiser f (driven by the Lagrange
matrix of the overlap penalty) with a sample-space denoiser g defined through
the stationarity of a per-row regularized fit of eta1.  Its fixed points are
exactly the stationary points of the effective objective, which is the main
correctness check (`stationarity_residual`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as _rng
from .effective_model import (EffectiveModel, grad_eta1_rows, grad_eta2,
                              hess_eta1_rows, effective_loglik,
                              stationarity_residual)
from .errors import DivergenceError, NumericalError, SolverError, ValidationError
from .spiked_data import SpikedDataset
from .baselines import overlap_matrix

_RIDGE = 1e-10
_MAX_COND = 1e12


def denoiser_f(Z: np.ndarray, Q_hat: np.ndarray, C_prev: np.ndarray):
    """Apply w = -(2 Q_hat + C_prev)^{-1} z to each row of Z.

    Near-singular systems get a 1e-10 ridge once; a still-singular system is a
    hard error.  Returns (W, A_inv, ridged) with A_inv the solved inverse so
    callers can reuse it for the Onsager coefficient.
    """
    A = 2.0 * np.asarray(Q_hat, dtype=float) + np.asarray(C_prev, dtype=float)
    ridged = False
    if np.linalg.cond(A) > _MAX_COND:
        A = A + _RIDGE * np.eye(A.shape[0])
        ridged = True
        if np.linalg.cond(A) > _MAX_COND:
            raise NumericalError("2*Q_hat + C is singular even after ridge")
    A_inv = np.linalg.inv(A)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    return -Z @ A_inv.T, A_inv, ridged


def _g_residual(U, Y, B, model):
    H = Y + U @ B.T
    return grad_eta1_rows(H, np.zeros(model.k), model) / model.alpha + U, H


def _bisect_seed(Y, B_diag, model, iters=70):
    """Per-unit bisection roots with the off-diagonal coupling dropped.

    Every root of u + grad_eta1(b u + y)/alpha = 0 lies inside
    |u| <= max|h|/sqrt(alpha), and the residual changes sign across that box,
    so bisection always lands on a root; when the equation is transiently
    non-monotone (strongly negative b) this fixes which root is taken, the
    same convention the state-evolution quadrature engine uses.
    """
    prior = model.hidden_prior
    if not prior.separable_units:
        return np.zeros_like(Y)
    from .state_evolution import _g_scalar
    U = np.empty_like(Y)
    for a in range(model.k):
        u, _ = _g_scalar(Y[:, a], float(B_diag[a]), prior.unit_points,
                         prior.unit_weights, model.alpha, iters=iters)
        U[:, a] = u
    return U


def _newton_rows(U, Y, B, model, tol, max_iter):
    """Batched safeguarded Newton from the given seed; keeps per-row best."""
    k = model.k
    eye = np.eye(k)
    res, H = _g_residual(U, Y, B, model)
    rnorm = np.linalg.norm(res, axis=1)
    for _ in range(max_iter):
        if np.max(rnorm) < tol:
            break
        Hess = hess_eta1_rows(H, np.zeros(k), model) / model.alpha   # (n,k,k)
        J = eye[None, :, :] + Hess @ B[None, :, :]
        try:
            step = np.linalg.solve(J, res[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = res
        scale = np.ones(Y.shape[0])
        U_try, res_try, H_try, rnorm_try = U, res, H, rnorm
        for _ in range(25):
            U_try = U - scale[:, None] * step
            res_try, H_try = _g_residual(U_try, Y, B, model)
            rnorm_try = np.linalg.norm(res_try, axis=1)
            bad = rnorm_try > rnorm * (1.0 - 1e-4) + 1e-300
            if not np.any(bad & (rnorm > tol)):
                break
            scale = np.where(bad, 0.5 * scale, scale)
        worse = rnorm_try > rnorm
        U = np.where(worse[:, None], U, U_try)
        res = np.where(worse[:, None], res, res_try)
        H = np.where(worse[:, None], H, H_try)
        rnorm = np.minimum(rnorm, rnorm_try)
    return U, H, rnorm


def _grid_reseed(Y, B, model):
    """Box scan with zoom for rows where the seeded Newton stalled.

    The transient Onsager matrix can push the stationarity into a multi-root
    regime; every root lies in the box |u_a| <= max|h|/sqrt(alpha) and the
    residual field points outward on its boundary, so a root always exists
    inside.  A zooming scan finds its basin deterministically; only small k
    needs this.
    """
    k = model.k
    if k > 3:
        raise SolverError("g denoiser stalled and the grid fallback only "
                          "covers k <= 3")
    bound = model.hidden_prior.max_abs() / np.sqrt(model.alpha) + 1e-9

    def scan(centers, half_width, points):
        axis = np.linspace(-1.0, 1.0, points)
        offs = np.stack(np.meshgrid(*([axis] * k), indexing="ij"), -1).reshape(-1, k)
        grid = centers[:, None, :] + half_width * offs[None, :, :]   # (n, G, k)
        np.clip(grid, -bound, bound, out=grid)
        Hg = Y[:, None, :] + grid @ B.T
        res = grad_eta1_rows(Hg.reshape(-1, k), np.zeros(k), model) / model.alpha
        res = res.reshape(Y.shape[0], -1, k) + grid
        best = np.argmin(np.einsum("ngk,ngk->ng", res, res), axis=1)
        return grid[np.arange(Y.shape[0]), best]

    centers = scan(np.zeros((Y.shape[0], k)), bound, 41)
    width = bound * (2.0 / 40)
    for _ in range(4):
        centers = scan(centers, width, 21)
        width /= 8.0
    return centers


def _edge_seeds(Y, B, model):
    """Candidate roots with one coordinate pinned at its saturation bound.

    Roots of the stationarity frequently sit in thin basins hugging the box
    boundary (a saturated unit); pinning each coordinate at +-bound and
    bisecting the remaining scalar coordinates covers those basins.
    Returns a list of (n, k) candidate arrays.
    """
    from .state_evolution import _g_scalar
    prior = model.hidden_prior
    if not prior.separable_units:
        return []
    k = model.k
    bound = prior.max_abs() / np.sqrt(model.alpha)
    seeds = []
    for pinned in range(k):
        for sign in (-1.0, 1.0):
            U = np.zeros_like(Y)
            U[:, pinned] = sign * bound
            for a in range(k):
                if a == pinned:
                    continue
                # exact for k = 2; a seed (polished by Newton) for k = 3
                shift = Y[:, a] + sign * bound * B[a, pinned]
                u, _ = _g_scalar(shift, float(B[a, a]), prior.unit_points,
                                 prior.unit_weights, model.alpha)
                U[:, a] = u
            seeds.append(U)
    return seeds


def solve_g(Y: np.ndarray, B: np.ndarray, model: EffectiveModel,
            U0: Optional[np.ndarray] = None, tol: float = 1e-10,
            max_iter: int = 60):
    """Row-wise solve of u + grad_eta1(B u + y)/alpha = 0.

    This is the stationarity condition of the prox form of the g denoiser;
    B is symmetric but may have either sign structure (after the first sweep
    it is negative definite by construction).  A per-unit bisection on the
    diagonal part of B provides the seed and the root-selection convention;
    Newton with per-row backtracking polishes against the full B, with a
    deterministic box-scan reseed for rows the transient multi-root regime
    stalls.  Returns (U, H_tilde).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    B = np.asarray(B, dtype=float)
    hmax2 = model.hidden_prior.max_abs() ** 2
    single_root = np.min(np.linalg.eigvalsh(0.5 * (B + B.T))) > -0.98 / hmax2
    if U0 is not None and single_root and np.all(np.isfinite(U0)):
        # fast path: away from the transient multi-root regime the previous
        # iterate is an excellent seed and the root is the bisection root
        U, H, rnorm = _newton_rows(np.array(U0, dtype=float), Y, B, model,
                                   tol, 12)
        if np.max(rnorm) < tol:
            return U, H
    U = _bisect_seed(Y, np.diag(B), model)
    off_scale = np.max(np.abs(B - np.diag(np.diag(B))))
    if off_scale == 0.0:
        res, H = _g_residual(U, Y, B, model)
        if np.max(np.linalg.norm(res, axis=1)) < tol:
            return U, H
    U, H, rnorm = _newton_rows(U, Y, B, model, tol, max_iter)
    if np.max(rnorm) >= tol:
        stuck = rnorm >= tol
        Ys = Y[stuck]
        seeds = [_grid_reseed(Ys, B, model)] + _edge_seeds(Ys, B, model)
        for seed in seeds:
            idx_stuck = np.flatnonzero(stuck)
            U2, H2, r2 = _newton_rows(seed, Ys, B, model, tol, max_iter)
            better = r2 < rnorm[idx_stuck]
            U[idx_stuck[better]] = U2[better]
            H[idx_stuck[better]] = H2[better]
            rnorm[idx_stuck] = np.minimum(rnorm[idx_stuck], r2)
            if np.max(rnorm) < tol:
                break
    if np.max(rnorm) >= tol:
        raise SolverError(
            f"g denoiser: {int(np.sum(rnorm >= tol))} rows above tol "
            f"after Newton and reseeding (worst residual {np.max(rnorm):.3e})")
    return U, H


def denoiser_g(Y: np.ndarray, B: np.ndarray, model: EffectiveModel,
               tol: float = 1e-10):
    """Returns (u, h_tilde) rows with u = B^{-1}(h_tilde - y)."""
    U, H = solve_g(Y, B, model, tol=tol)
    return U, H


def g_jacobian_rows(H: np.ndarray, B: np.ndarray, model: EffectiveModel) -> np.ndarray:
    """du/dy per row by implicit differentiation: -(I + S B)^{-1} S, S = hess/alpha."""
    k = model.k
    S = hess_eta1_rows(H, np.zeros(k), model) / model.alpha
    J = np.eye(k)[None, :, :] + S @ B[None, :, :]
    return -np.linalg.solve(J, S)


@dataclass
class AmpConfig:
    """Run controls: damping acts on the Lagrange matrix update only."""

    damping: float = 0.7
    max_iters: int = 200
    tol_conv: float = 1e-10
    init: str = "informed"           # "random" | "informed" | "spectral"
    init_overlap: float = 0.3
    init_scale: float = 1.0
    seed: int = 0
    g_tol: float = 1e-10
    track_objective: bool = True

    def __post_init__(self):
        if not 0.0 <= self.damping < 1.0:
            raise ValidationError("damping must lie in [0, 1)")
        if self.tol_conv <= 0:
            raise ValidationError("convergence tolerance must be positive")
        if self.init not in ("random", "informed", "spectral"):
            raise ValidationError(f"unknown init mode {self.init!r}")


@dataclass
class AmpTrace:
    overlaps: np.ndarray          # (T, k, r)
    residuals: np.ndarray         # (T,) squared step sizes (1/d)||dW||_F^2
    objectives: np.ndarray        # (T,) effective objective per dimension (nan if untracked)
    W: np.ndarray                 # final weights (d, k)
    Q_hat: np.ndarray
    n_iters: int = 0
    converged: bool = False
    stationarity: float = np.nan
    flags: dict = field(default_factory=dict)

    def final_overlap(self) -> np.ndarray:
        return self.overlaps[self.n_iters - 1]


def informed_coefficient(m0: float, scale: float) -> float:
    """Signal coefficient making the init overlap equal m0 against unit-variance
    spikes with Gaussian noise of the given scale."""
    if not 0.0 <= m0 < 1.0:
        raise ValidationError("informed overlap must lie in [0, 1)")
    return scale * m0 / np.sqrt(1.0 - m0 * m0)


def _init_Z(data: SpikedDataset, k: int, config: AmpConfig) -> np.ndarray:
    d, r = data.d, data.r
    Z = config.init_scale * _rng.gaussian_rows(config.seed, _rng.STREAM_INIT, d, k)
    if config.init == "informed":
        coeff = informed_coefficient(config.init_overlap, config.init_scale)
        for a in range(min(k, r)):
            Z[:, a] += coeff * data.W_star[:, a]
    elif config.init == "spectral":
        from .baselines import svd_baseline
        Z = svd_baseline(data, k)  # columns already scaled to norm sqrt(d)
    return Z


def amp_run(data: SpikedDataset, model: EffectiveModel, config: AmpConfig) -> AmpTrace:
    """Run the message-passing loop to convergence or max_iters.

    Mirrors the update order: weight denoise, Onsager-corrected sample field,
    sample denoise, Onsager-corrected weight field, damped Lagrange update.
    """
    if model.k < 1:
        raise ValidationError("model must have at least one hidden unit")
    n, d, k = data.n, data.d, model.k
    alpha = model.alpha
    X = data.X
    sqrt_n = np.sqrt(n)

    Z = _init_Z(data, k, config)
    U = np.zeros((n, k))
    C = np.zeros((k, k))
    Q_hat = 0.5 * np.eye(k)
    W_prev = None

    T = config.max_iters
    overlaps = np.full((T, k, data.r), np.nan)
    residuals = np.full(T, np.nan)
    objectives = np.full(T, np.nan)
    flags = {"ridged": 0, "g_warn": 0}
    converged = False
    n_iters = 0

    for t in range(T):
        W, A_inv, ridged = denoiser_f(Z, Q_hat, C)
        flags["ridged"] += int(ridged)
        if not np.all(np.isfinite(W)):
            raise DivergenceError(f"weights diverged at iteration {t}",
                                  last_state={"W": W_prev, "t": t})
        B = -(1.0 / alpha) * A_inv                      # (1/n) * d * df/dz
        Y = X @ W / sqrt_n - U @ B.T
        if not np.all(np.isfinite(Y)):
            raise DivergenceError(f"sample field diverged at iteration {t}",
                                  last_state={"W": W_prev, "t": t})
        U, H = solve_g(Y, B, model, U0=U, tol=config.g_tol)
        C = g_jacobian_rows(H, B, model).mean(axis=0)   # (1/n) sum over n rows
        Z = X.T @ U / sqrt_n - W @ C.T
        Q_hat = config.damping * Q_hat + (1.0 - config.damping) * grad_eta2(
            W.T @ W / d, None, model)

        overlaps[t] = overlap_matrix(W, data.W_star)
        if config.track_objective:
            objectives[t] = effective_loglik(W, data, model) / d
        step = np.inf if W_prev is None else float(np.sum((W - W_prev) ** 2)) / d
        residuals[t] = step
        W_prev = W
        n_iters = t + 1
        if step < config.tol_conv:
            converged = True
            break

    return AmpTrace(overlaps=overlaps[:n_iters], residuals=residuals[:n_iters],
                    objectives=objectives[:n_iters], W=W_prev, Q_hat=Q_hat,
                    n_iters=n_iters, converged=converged,
                    stationarity=stationarity_residual(W_prev, data, model),
                    flags=flags)
