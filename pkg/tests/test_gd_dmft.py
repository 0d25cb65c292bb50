import numpy as np
import pytest

from rbmlab.effective_model import EffectiveModel, HiddenPrior
from rbmlab.errors import CapacityError
from rbmlab.gd_dmft import (GdConfig, dmft_fixed_point_overlap, dmft_predict,
                            gd_run)
from rbmlab.numutil import gauss_normal_grid
from rbmlab.spiked_data import SpikePrior, sample_spiked
from rbmlab.state_evolution import (GaussHermiteEngine, SeProblem, k1_summary,
                                    se_fixed_point)

ALPHA = 2.0


def problem(k=1, r=None, lam=1.4, alpha=ALPHA):
    r = r or k
    model = EffectiveModel(HiddenPrior.rademacher(k), alpha=alpha)
    return SeProblem(model=model, prior_u=SpikePrior.rademacher(r),
                     prior_w=SpikePrior.rademacher(r), Lambda=np.full(r, lam))


def dataset(lam, d, k=1, seed=0, alpha=ALPHA):
    pu = SpikePrior.rademacher(k)
    return sample_spiked(int(alpha * d), d, pu, pu, [lam] * k, seed=seed)


# --- finite-size gradient ascent ---------------------------------------------------


def test_gd_zero_learning_rate_is_constant():
    data = dataset(1.4, 200)
    model = EffectiveModel(HiddenPrior.rademacher(1), alpha=ALPHA)
    tr = gd_run(data, model, GdConfig(learning_rate=0.0, steps=5, seed=0))
    assert np.allclose(tr.overlaps, tr.overlaps[0])


def test_gd_no_signal_stays_small():
    data = dataset(0.0, 1000)
    model = EffectiveModel(HiddenPrior.rademacher(1), alpha=ALPHA)
    tr = gd_run(data, model, GdConfig(learning_rate=0.2, steps=40, init="random",
                                      seed=1))
    assert np.max(tr.overlaps) < 0.1


def test_gd_converges_to_stationary_point():
    from rbmlab.effective_model import stationarity_residual
    data = dataset(1.4, 800, seed=2)
    model = EffectiveModel(HiddenPrior.rademacher(1), alpha=ALPHA)
    tr = gd_run(data, model, GdConfig(learning_rate=0.2, steps=200,
                                      init="informed", init_overlap=0.3, seed=2))
    assert stationarity_residual(tr.W, data, model) < 1e-3


# --- the asymptotic process --------------------------------------------------------


def test_dmft_capacity_limits():
    prob = problem()
    with pytest.raises(CapacityError):
        dmft_predict(prob, kappa=0.2, steps=100, n_samples=10_000)
    with pytest.raises(CapacityError):
        dmft_predict(prob, kappa=0.2, steps=5, n_samples=100)


def test_dmft_zero_signal():
    prob = problem(lam=0.0)
    res = dmft_predict(prob, kappa=0.2, steps=8, n_samples=20_000, seed=0,
                       init_overlap=0.0)
    assert np.max(res.overlaps) < 3.0 / np.sqrt(20_000) * 5


def test_dmft_causality_of_kernels():
    prob = problem()
    res = dmft_predict(prob, kappa=0.2, steps=6, n_samples=10_000, seed=0)
    for (t, i) in res.kernels.B:
        assert i < t
    for (t, i) in res.kernels.C:
        assert i <= t


def test_dmft_one_step_analytic_oracle():
    # one update from an informed Gaussian start, k = r = 1:
    # overlap_1 is computable from Gaussian moments and scalar quadrature
    lam, kappa, m0, s0 = 1.4, 0.25, 0.4, 1.0
    prob = problem(lam=lam)
    res = dmft_predict(prob, kappa=kappa, steps=1, n_samples=1_000_000, seed=3,
                       init_overlap=m0, init_scale=s0)
    alpha = ALPHA
    gam = np.sqrt(alpha) * lam
    z, wz = gauss_normal_grid(1600)

    # W_1 = W_0 + kappa (Z_0 + C00 W_0 - alpha Q0 W_0) with
    # Z_0 ~ N_0 W + sqrt(Om00) H, N_0 = E[U_0 U] Gam, U_0 = eta1'(Y_0),
    # Y_0 ~ M_0 U + sqrt(Sig00) G, M_0 = E[W_0 W] Gam / alpha.
    q0 = m0 ** 2 + s0 ** 2                 # E[W_0^2]
    M0 = m0 * gam / alpha
    Sig00 = q0 / alpha
    d1 = lambda y: np.sqrt(alpha) * np.tanh(np.sqrt(alpha) * y)
    d2 = lambda y: alpha / np.cosh(np.sqrt(alpha) * y) ** 2
    EuU = Eu2 = C00 = 0.0
    for U in (1.0, -1.0):
        y = M0 * U + np.sqrt(Sig00) * z
        EuU += 0.5 * np.sum(wz * d1(y) * U)
        Eu2 += 0.5 * np.sum(wz * d1(y) ** 2)
        C00 += 0.5 * np.sum(wz * d2(y))
    N0 = EuU * gam
    Q0 = 1.0                                # <h^2> = 1 for sign units
    lin = 1.0 + kappa * C00 - kappa * alpha * Q0
    # W_1 = lin W_0 + kappa Z_0; W_0 = m0 W + s0 xi
    EW1W = lin * m0 + kappa * N0
    EW1sq = (lin * m0 + kappa * N0) ** 2 + (lin * s0) ** 2 + kappa ** 2 * (
        Eu2 - (EuU * 1.0) ** 2 * 0.0) - kappa ** 2 * N0 ** 2 + 2 * lin * kappa * (
        0.0)  # cross term handled below
    # cleaner: E[W1^2] = E[(lin W0 + kappa Z0)^2]
    #        = lin^2 E[W0^2] + 2 lin kappa E[W0 Z0] + kappa^2 E[Z0^2]
    # W0 and the Z0-noise are independent; E[W0 Z0] = m0 N0 (through W),
    # E[Z0^2] = N0^2 + Om00, Om00 = E[U0^2]
    EW1sq = lin ** 2 * q0 + 2 * lin * kappa * m0 * N0 + kappa ** 2 * (
        N0 ** 2 + Eu2)
    oracle = abs(EW1W) / np.sqrt(EW1sq)
    got = res.overlaps[1, 0, 0]
    assert got == pytest.approx(oracle, abs=4e-3)


def test_dmft_derivative_tensors_match_finite_differences():
    # spot-check du_t/dY_i of the sample-side chain against finite differences
    # of an independent scalar re-propagation sharing the same memory kernels
    prob = problem(lam=1.4)
    kappa, steps, n = 0.25, 4, 10_000
    res = dmft_predict(prob, kappa=kappa, steps=steps, n_samples=n, seed=4)
    Bk = {key: float(val[0, 0]) for key, val in res.kernels.B.items()}
    alpha = ALPHA
    sa = np.sqrt(alpha)
    d1 = lambda a: sa * np.tanh(sa * a)            # eta1' for sign units
    d2 = lambda a: alpha / np.cosh(sa * a) ** 2    # eta1''

    rng = np.random.default_rng(0)
    Y = rng.standard_normal(steps)

    def chain(Yvals):
        us = []
        for t in range(steps):
            a = Yvals[t] + sum(Bk[(t, i)] * us[i] for i in range(t))
            us.append(d1(a))
        return us

    base = chain(Y)
    # analytic derivative recursion, same structure the module uses
    DU = {}
    for t in range(steps):
        a = Y[t] + sum(Bk[(t, j)] * base[j] for j in range(t))
        gf = d2(a)
        for i in range(t + 1):
            inner = 1.0 if i == t else 0.0
            inner += sum(Bk[(t, j)] * DU[(j, i)] for j in range(i, t))
            DU[(t, i)] = gf * inner

    h = 1e-6
    for i in range(steps):
        Yp, Ym = Y.copy(), Y.copy()
        Yp[i] += h
        Ym[i] -= h
        up, um = chain(Yp), chain(Ym)
        for t in range(i, steps):
            fd = (up[t] - um[t]) / (2 * h)
            assert DU[(t, i)] == pytest.approx(fd, abs=1e-6)


def test_dmft_tracks_gd_k1():
    lam, kappa, steps = 1.4, 0.2, 20
    prob = problem(lam=lam)
    dm = dmft_predict(prob, kappa=kappa, steps=steps, n_samples=50_000, seed=0,
                      init_overlap=0.3)
    data = dataset(lam, 2000, seed=11)
    model = EffectiveModel(HiddenPrior.rademacher(1), alpha=ALPHA)
    gd = gd_run(data, model, GdConfig(learning_rate=kappa, steps=steps,
                                      init="informed", init_overlap=0.3, seed=11))
    assert np.max(np.abs(dm.overlaps - gd.overlaps)) < 0.06


def test_dmft_fixed_point_matches_se():
    lam, kappa = 1.4, 0.25
    prob = problem(lam=lam)
    dm = dmft_predict(prob, kappa=kappa, steps=45, n_samples=100_000, seed=1,
                      init_overlap=0.3)
    fp_overlap = dmft_fixed_point_overlap(dm)[0, 0]
    se = k1_summary(prob, se_fixed_point(prob, m0=2.0).final)
    assert abs(fp_overlap - se["overlap"]) < 0.02
