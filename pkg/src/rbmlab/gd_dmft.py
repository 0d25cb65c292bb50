"""Full-batch gradient ascent on the effective objective and its exact
high-dimensional asymptotics.

The asymptotics realize the weight and sample iterates as low-dimensional
stochastic processes with memory: Gaussian fields whose covariance across
time is generated self-consistently by population moments, plus Onsager
memory sums that reconstruct the uncorrected fields inside the update maps.
The population is propagated one step per sweep; Gaussian paths extend by
block-Cholesky conditioning so earlier steps never get resampled.

Update maps (0-based time, mirroring the finite-size run):

    u_t = f~(Y_t + sum_{i<t} B_{ti} u_i),          f~ = grad eta1
    w_{t+1} = g~(Z_t + sum_{i<=t} C_{ti} w_i, w_t, Q_t),
    g~(z, w, Q) = w + kappa (z - alpha Q w),       Q_t = <h h^T> at E[w_t w_t^T]

with B, C the expected path derivatives of the opposite map.  Because g~ is
linear, the weight-side derivative tensors are deterministic; only the
sample side keeps per-sample derivative triangles.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .effective_model import (EffectiveModel, effective_grad, effective_loglik,
                              grad_eta1_rows, hess_eta1_rows, hidden_second_moment)
from .errors import CapacityError, DivergenceError, NumericalError, ValidationError
from .numutil import symmetrize
from .baselines import overlap_matrix
from .spiked_data import SpikedDataset
from .state_evolution import SeProblem, _prior_draws
from . import rng as _rng

MAX_STEPS = 64
MAX_SAMPLES = 1_000_000
MIN_SAMPLES = 10_000

_PSD_FLOOR = 1e-10


# --- finite-size gradient ascent ------------------------------------------------


@dataclass
class GdConfig:
    learning_rate: float
    steps: int
    init: str = "informed"        # "random" | "informed"
    init_overlap: float = 0.3
    init_scale: float = 1.0
    seed: int = 0
    track_objective: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning rate must be nonnegative")
        if self.init not in ("random", "informed"):
            raise ValidationError(f"unknown init mode {self.init!r}")


@dataclass
class GdTrace:
    overlaps: np.ndarray          # (steps+1, k, r), entry 0 is the init
    objectives: np.ndarray
    W: np.ndarray


def gd_init(data: SpikedDataset, k: int, config: GdConfig) -> np.ndarray:
    from .amp import informed_coefficient
    W = config.init_scale * _rng.gaussian_rows(config.seed, _rng.STREAM_INIT, data.d, k)
    if config.init == "informed":
        coeff = informed_coefficient(config.init_overlap, config.init_scale)
        for a in range(min(k, data.r)):
            W[:, a] += coeff * data.W_star[:, a]
    return W


def gd_run(data: SpikedDataset, model: EffectiveModel, config: GdConfig) -> GdTrace:
    """Ascend W <- W + kappa * grad of the effective objective."""
    T = config.steps
    W = gd_init(data, model.k, config)
    overlaps = np.zeros((T + 1, model.k, data.r))
    objectives = np.full(T + 1, np.nan)
    overlaps[0] = overlap_matrix(W, data.W_star)
    if config.track_objective:
        objectives[0] = effective_loglik(W, data, model) / data.d
    for t in range(T):
        W = W + config.learning_rate * effective_grad(W, data, model)
        if not np.all(np.isfinite(W)):
            raise DivergenceError(f"gradient ascent diverged at step {t + 1}",
                                  last_state={"t": t, "overlaps": overlaps[:t + 1]})
        overlaps[t + 1] = overlap_matrix(W, data.W_star)
        if config.track_objective:
            objectives[t + 1] = effective_loglik(W, data, model) / data.d
    return GdTrace(overlaps=overlaps, objectives=objectives, W=W)


# --- asymptotic process ----------------------------------------------------------


@dataclass
class DmftKernels:
    M: list                      # per-step (k,k) signal coefficients, sample side
    N: list                      # per-step (k,k) signal coefficients, weight side
    Sigma: dict                  # {(s,s'): (k,k)} sample-side field covariance
    Omega: dict                  # {(s,s'): (k,k)} weight-side field covariance
    B: dict                      # {(t,i): (k,k)} memory entering the sample map
    C: dict                      # {(t,i): (k,k)} memory entering the weight map
    Q: list                      # per-step (k,k) tilted second moments

    def to_json(self) -> str:
        def enc(obj):
            if isinstance(obj, dict):
                return {f"{key[0]},{key[1]}": np.asarray(val).tolist()
                        for key, val in obj.items()}
            return [np.asarray(v).tolist() for v in obj]
        return json.dumps({"M": enc(self.M), "N": enc(self.N),
                           "Sigma": enc(self.Sigma), "Omega": enc(self.Omega),
                           "B": enc(self.B), "C": enc(self.C), "Q": enc(self.Q)},
                          sort_keys=True)


@dataclass
class DmftResult:
    overlaps: np.ndarray          # (steps+1, k, r)
    kernels: DmftKernels
    psd_repairs: int
    converged: bool               # trajectory settled over the last window

    def final_overlap(self) -> np.ndarray:
        return self.overlaps[-1]


class _GaussianPath:
    """Incrementally extended family of jointly Gaussian (k,)-blocks.

    Maintains block-Cholesky rows of the time-block covariance; field t is
    mean_t + sum_{s<=t} g_s L[t][s]^T with latents g_s shared by all steps.
    """

    def __init__(self, n_samples, k, rng_key):
        self.n = n_samples
        self.k = k
        self.L = []               # L[t][s] blocks, s <= t
        self.lat = []             # per-step (n,k) standard normals
        self.cov = []             # cov[t][s] blocks, s <= t
        self._gen = np.random.Generator(np.random.Philox(key=rng_key))
        self.repairs = 0

    def extend(self, cov_row, mean):
        """Append step t with covariance row cov_row ([t+1] blocks) and mean (n,k)."""
        t = len(self.L)
        row = []
        for s in range(t):
            Bblk = cov_row[s].copy()
            for j in range(s):
                Bblk -= row[j] @ self.L[s][j].T
            row.append(solve_triangular(self.L[s][s], Bblk.T, lower=True).T)
        D = symmetrize(cov_row[t] - sum((blk @ blk.T for blk in row),
                                        np.zeros((self.k, self.k))))
        vals, vecs = np.linalg.eigh(D)
        if np.any(vals < _PSD_FLOOR):
            self.repairs += 1
            vals = np.clip(vals, _PSD_FLOOR, None)
        row.append(vecs @ np.diag(np.sqrt(vals)))
        self.L.append(row)
        self.cov.append([blk.copy() for blk in cov_row])
        self.lat.append(self._gen.standard_normal((self.n, self.k)))
        out = mean.copy()
        for s in range(t + 1):
            out += self.lat[s] @ row[s].T
        return out


def dmft_predict(problem: SeProblem, kappa: float, steps: int,
                 n_samples: int = 100_000, seed: int = 0,
                 init_overlap: float = 0.3, init_scale: float = 1.0,
                 fp_tol: float = 5e-3, fp_window: int = 5) -> DmftResult:
    """Propagate the asymptotic process for `steps` updates.

    Cost grows as steps^2 * n_samples * k^2; requests beyond the documented
    caps are refused rather than truncated.
    """
    if steps > MAX_STEPS:
        raise CapacityError(f"steps = {steps} exceeds the cap {MAX_STEPS}")
    if not MIN_SAMPLES <= n_samples <= MAX_SAMPLES:
        raise CapacityError(
            f"population size must lie in [{MIN_SAMPLES}, {MAX_SAMPLES}]")
    model, k, r = problem.model, problem.k, problem.r
    alpha = model.alpha
    Gam = problem.gamma()
    N = n_samples
    eye = np.eye(k)
    zero_b = np.zeros(k)

    def key(tag):
        return np.array([np.uint64(seed), np.uint64(tag)], dtype=np.uint64)

    gen_pop = np.random.Generator(np.random.Philox(key=key(1)))
    Wsig = np.zeros((N, k))
    Wsig[:, :min(k, r)] = _prior_draws(problem.prior_w, gen_pop, N)[:, :min(k, r)]
    Usig = np.zeros((N, k))
    Usig[:, :min(k, r)] = _prior_draws(problem.prior_u, gen_pop, N)[:, :min(k, r)]

    # init weights: matched informed columns plus Gaussian noise, scaled so
    # the init overlap equals init_overlap (same convention as gd_init)
    from .amp import informed_coefficient
    coeff = informed_coefficient(init_overlap, init_scale) if init_overlap else 0.0
    W0 = init_scale * gen_pop.standard_normal((N, k))
    for a in range(min(k, r)):
        W0[:, a] += coeff * Wsig[:, a]

    y_path = _GaussianPath(N, k, key(2))
    z_path = _GaussianPath(N, k, key(3))

    Wvals = [W0]
    Uvals = []
    DU = {}                   # (t,i) -> (N,k,k) float32 per-sample derivatives
    DW = {}                   # (t,i) -> (k,k) deterministic derivatives
    kern = DmftKernels(M=[], N=[], Sigma={}, Omega={}, B={}, C={}, Q=[])
    overlaps = np.zeros((steps + 1, k, r))

    w_m2 = problem.prior_w.second_moment()

    def record_overlap(t):
        Wt = Wvals[t]
        num = np.abs(Wt.T @ Wsig[:, :r]) / N
        var_a = np.clip(np.mean(Wt ** 2, axis=0), 1e-300, None)
        overlaps[t] = num / np.sqrt(np.outer(var_a, np.full(r, w_m2)))

    record_overlap(0)

    for t in range(steps):
        # sample-side field: mean M_t U, covariance from weight moments
        Mt = (Wvals[t].T @ Wsig / N) @ Gam / alpha
        kern.M.append(Mt)
        cov_row = [(Wvals[t].T @ Wvals[s] / N) / alpha for s in range(t + 1)]
        for s in range(t + 1):
            kern.Sigma[(t, s)] = cov_row[s]
        Yt = y_path.extend(cov_row, Usig @ Mt.T)

        # sample map with memory reconstruction
        At = Yt.copy()
        for i in range(t):
            At += Uvals[i] @ kern.B[(t, i)].T
        Uvals.append(grad_eta1_rows(At, zero_b, model))
        grad_f = hess_eta1_rows(At, zero_b, model).astype(np.float32)
        for i in range(t + 1):
            inner = np.broadcast_to(eye.astype(np.float32), (N, k, k)).copy() \
                if i == t else np.zeros((N, k, k), dtype=np.float32)
            for j in range(i, t):
                inner += np.matmul(kern.B[(t, j)].astype(np.float32)[None], DU[(j, i)])
            DU[(t, i)] = np.matmul(grad_f, inner)
            kern.C[(t, i)] = DU[(t, i)].mean(axis=0, dtype=np.float64)

        # weight-side field: mean N_t W, covariance from sample moments
        Nt = (Uvals[t].T @ Usig / N) @ Gam
        kern.N.append(Nt)
        cov_row_z = [Uvals[t].T @ Uvals[s] / N for s in range(t + 1)]
        for s in range(t + 1):
            kern.Omega[(t, s)] = cov_row_z[s]
        Zt = z_path.extend(cov_row_z, Wsig @ Nt.T)

        # weight map with memory reconstruction
        Qt = hidden_second_moment(symmetrize(Wvals[t].T @ Wvals[t] / N), None, model)
        kern.Q.append(Qt)
        Apt = Zt.copy()
        for i in range(t + 1):
            Apt += Wvals[i] @ kern.C[(t, i)].T
        Wnext = Wvals[t] + kappa * (Apt - alpha * Wvals[t] @ Qt.T)
        if not np.all(np.isfinite(Wnext)):
            raise NumericalError(f"asymptotic weight process diverged at step {t + 1}")
        Wvals.append(Wnext)

        # deterministic weight-side derivative blocks; the weight map is linear
        lin = eye - kappa * alpha * Qt
        for i in range(t + 1):
            blk = kappa * eye.copy() if i == t else np.zeros((k, k))
            for j in range(i + 1, t + 1):
                blk += kappa * kern.C[(t, j)] @ DW[(j, i)]
            blk += lin @ DW.get((t, i), np.zeros((k, k)))
            DW[(t + 1, i)] = blk
            kern.B[(t + 1, i)] = blk / alpha
        record_overlap(t + 1)

    tail = overlaps[max(0, steps - fp_window):]
    converged = bool(np.max(np.abs(tail - tail[-1])) < fp_tol) if steps >= fp_window else False
    return DmftResult(overlaps=overlaps, kernels=kern,
                      psd_repairs=y_path.repairs + z_path.repairs,
                      converged=converged)


def dmft_fixed_point_overlap(result: DmftResult, tol: float = 5e-3,
                             window: int = 5) -> np.ndarray:
    """Limiting overlap matrix; raises when the tail is still moving."""
    tail = result.overlaps[-window:]
    if np.max(np.abs(tail - tail[-1])) >= tol:
        raise NumericalError("trajectory still moving over the final window; "
                             "increase steps")
    return result.overlaps[-1]
