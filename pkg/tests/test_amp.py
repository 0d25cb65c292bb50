import numpy as np
import pytest

from rbmlab.amp import (AmpConfig, amp_run, denoiser_f, denoiser_g,
                        g_jacobian_rows, solve_g)
from rbmlab.effective_model import (EffectiveModel, HiddenPrior,
                                    grad_eta1_rows, stationarity_residual)
from rbmlab.errors import DivergenceError, ValidationError
from rbmlab.spiked_data import SpikePrior, SpikedDataset, sample_spiked


def model(k=1, alpha=2.0):
    return EffectiveModel(HiddenPrior.rademacher(k), alpha=alpha)


# --- f denoiser ------------------------------------------------------------------


def test_denoiser_f_identity_case():
    z = np.array([[0.3, -1.2]])
    W, _, _ = denoiser_f(z, 0.5 * np.eye(2), np.zeros((2, 2)))
    assert np.allclose(W, -z)


def test_denoiser_f_halving_case():
    z = np.array([[2.0], [-4.0]])
    W, _, _ = denoiser_f(z, 0.5 * np.eye(1), np.eye(1))
    assert np.allclose(W, -z / 2.0)


def test_denoiser_f_linearity():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 2))
    Q = np.array([[0.6, 0.1], [0.1, 0.5]])
    C = np.array([[0.2, 0.0], [0.0, -0.1]])
    W1, _, _ = denoiser_f(z, Q, C)
    W3, _, _ = denoiser_f(3.0 * z, Q, C)
    assert np.allclose(W3, 3.0 * W1, rtol=1e-12)


# --- g denoiser ------------------------------------------------------------------


def bisect_oracle(y, b, alpha, iters=200):
    lo, hi = -1 / np.sqrt(alpha) - 1e-9, 1 / np.sqrt(alpha) + 1e-9
    f = lambda u: u + np.tanh(np.sqrt(alpha) * (b * u + y)) / np.sqrt(alpha)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def test_denoiser_g_zero_field():
    U, H = denoiser_g(np.zeros((3, 2)), -0.5 * np.eye(2), model(2))
    assert np.allclose(U, 0.0, atol=1e-12)
    assert np.allclose(H, 0.0, atol=1e-12)


def test_denoiser_g_k1_oracle():
    m = model(1, alpha=2.0)
    U, _ = denoiser_g(np.array([[1.0]]), np.eye(1), m)
    oracle = bisect_oracle(1.0, 1.0, 2.0)
    assert U[0, 0] == pytest.approx(oracle, abs=1e-10)
    assert U[0, 0] == pytest.approx(-0.457, abs=1e-3)


def test_denoiser_g_residual_postcondition():
    rng = np.random.default_rng(1)
    m = model(2, alpha=2.0)
    Y = rng.standard_normal((50, 2))
    B = np.array([[-0.6, 0.05], [0.05, -0.5]])
    U, H = denoiser_g(Y, B, m)
    res = grad_eta1_rows(H, np.zeros(2), m) / 2.0 + U
    assert np.max(np.linalg.norm(res, axis=1)) < 1e-8
    assert np.allclose(H, Y + U @ B.T)


def test_denoiser_g_oddness():
    rng = np.random.default_rng(2)
    m = model(2, alpha=2.0)
    Y = rng.standard_normal((20, 2))
    B = np.array([[-0.7, 0.1], [0.1, -0.4]])
    U1, _ = denoiser_g(Y, B, m)
    U2, _ = denoiser_g(-Y, B, m)
    assert np.allclose(U2, -U1, atol=1e-9)


def test_g_jacobian_matches_fd():
    m = model(2, alpha=2.0)
    B = np.array([[-0.6, 0.08], [0.08, -0.5]])
    Y = np.array([[0.4, -1.1], [2.0, 0.3]])
    U, H = solve_g(Y, B, m)
    J = g_jacobian_rows(H, B, m)
    h = 1e-6
    for row in range(2):
        for a in range(2):
            Yp, Ym = Y.copy(), Y.copy()
            Yp[row, a] += h
            Ym[row, a] -= h
            Up, _ = solve_g(Yp, B, m)
            Um, _ = solve_g(Ym, B, m)
            fd = (Up[row] - Um[row]) / (2 * h)
            assert np.allclose(J[row][:, a], fd, atol=1e-6)


def test_onsager_b_matches_fd_jacobian_of_f():
    # B_t = (1/n) sum_i df/dz_i; f linear, so FD equals the analytic value exactly
    Q = np.array([[0.55, 0.05], [0.05, 0.45]])
    C = np.array([[-0.2, 0.02], [0.02, -0.3]])
    z = np.array([[0.3, 1.0]])
    _, A_inv, _ = denoiser_f(z, Q, C)
    h = 1e-7
    fd = np.zeros((2, 2))
    for a in range(2):
        zp, zm = z.copy(), z.copy()
        zp[0, a] += h
        zm[0, a] -= h
        Wp, _, _ = denoiser_f(zp, Q, C)
        Wm, _, _ = denoiser_f(zm, Q, C)
        fd[:, a] = (Wp[0] - Wm[0]) / (2 * h)
    assert np.allclose(fd, -A_inv, atol=1e-8)


# --- the full loop -----------------------------------------------------------------


def run_small(lam, seed=0, d=1200, k=1, alpha=2.0, **kw):
    pu, pw = SpikePrior.rademacher(k), SpikePrior.rademacher(k)
    data = sample_spiked(int(alpha * d), d, pu, pw, [lam] * k, seed=seed)
    cfg = AmpConfig(seed=seed, **kw)
    return data, amp_run(data, model(k, alpha), cfg)


def test_amp_no_signal_stays_small():
    _, trace = run_small(0.0, init="random", max_iters=40, track_objective=False)
    assert np.max(trace.overlaps) < 0.1


def test_amp_fixed_point_is_stationary():
    data, trace = run_small(1.4, init="informed", init_overlap=0.3)
    assert trace.converged
    assert trace.stationarity < 1e-3


def test_amp_recovers_above_threshold():
    _, trace = run_small(1.4, init="informed", init_overlap=0.3)
    assert trace.final_overlap()[0, 0] > 0.7


def test_amp_damping_bounds_q_hat_steps():
    # per-step Lagrange change is at most (1 - zeta) times the raw update range
    k, alpha, lam, zeta = 2, 2.0, 1.4, 0.9
    pu = SpikePrior.rademacher(k)
    data = sample_spiked(1600, 800, pu, pu, [lam] * k, seed=3)
    m = model(k, alpha)
    from rbmlab.effective_model import grad_eta2
    from rbmlab.amp import _init_Z, solve_g

    cfg = AmpConfig(damping=zeta, max_iters=10, init="informed", seed=3,
                    track_objective=False)
    Z = _init_Z(data, k, cfg)
    U = np.zeros((data.n, k))
    C = np.zeros((k, k))
    Q_hat = 0.5 * np.eye(k)
    for _ in range(6):
        W, A_inv, _ = denoiser_f(Z, Q_hat, C)
        B = -(1 / alpha) * A_inv
        Y = data.X @ W / np.sqrt(data.n) - U @ B.T
        U, H = solve_g(Y, B, m)
        C = g_jacobian_rows(H, B, m).mean(axis=0)
        Z = data.X.T @ U / np.sqrt(data.n) - W @ C.T
        target = grad_eta2(W.T @ W / data.d, None, m)
        new_Q = zeta * Q_hat + (1 - zeta) * target
        assert np.max(np.abs(new_Q - Q_hat)) <= (1 - zeta) * np.max(
            np.abs(target - Q_hat)) + 1e-14
        Q_hat = new_Q


def test_amp_permutation_equivariance():
    # permuting hidden-unit columns of the init permutes every iterate exactly
    from rbmlab.effective_model import grad_eta2

    k = 2
    pu = SpikePrior.rademacher(k)
    data = sample_spiked(600, 300, pu, pu, [1.4, 1.0], seed=5)
    m = model(k, 2.0)
    rng = np.random.default_rng(8)
    Z0 = rng.standard_normal((data.d, k)) + 0.3 * data.W_star

    def run(Z, sweeps=6):
        U = np.zeros((data.n, k))
        C = np.zeros((k, k))
        Q = 0.5 * np.eye(k)
        for _ in range(sweeps):
            W, A_inv, _ = denoiser_f(Z, Q, C)
            B = -0.5 * A_inv
            Y = data.X @ W / np.sqrt(data.n) - U @ B.T
            U, H = solve_g(Y, B, m)
            C = g_jacobian_rows(H, B, m).mean(axis=0)
            Z = data.X.T @ U / np.sqrt(data.n) - W @ C.T
            Q = 0.7 * Q + 0.3 * grad_eta2(W.T @ W / data.d, None, m)
        return W

    W = run(Z0)
    W_perm = run(Z0[:, ::-1])
    assert np.allclose(W_perm, W[:, ::-1], atol=1e-8)


def test_amp_divergence_error():
    pu = SpikePrior.rademacher(1)
    data = sample_spiked(100, 50, pu, pu, [1.0], seed=0)
    bad = SpikedDataset(X=data.X * np.inf, U_star=data.U_star.copy(),
                        W_star=data.W_star.copy(), Lambda=data.Lambda.copy(),
                        alpha=data.alpha, seed=0)
    with pytest.raises(DivergenceError):
        amp_run(bad, model(1, 2.0), AmpConfig(seed=0, track_objective=False))


def test_amp_config_validation():
    with pytest.raises(ValidationError):
        AmpConfig(damping=1.0)
    with pytest.raises(ValidationError):
        AmpConfig(init="bogus")


def test_amp_spectral_init_runs():
    data, trace = run_small(2.0, d=600, init="spectral", max_iters=40,
                            track_objective=False)
    assert trace.final_overlap()[0, 0] > 0.8


def test_amp_objective_increases_to_convergence():
    _, trace = run_small(1.4, init="informed", init_overlap=0.3)
    obj = trace.objectives[~np.isnan(trace.objectives)]
    assert obj[-1] >= obj[0]
