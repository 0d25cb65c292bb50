import io

import numpy as np
import pytest
from numpy.polynomial.hermite import hermgauss
from scipy.sparse.linalg import svds

from rbmlab.errors import CapacityError, ValidationError
from rbmlab.spiked_data import (Nonlinearity, SpikePrior, dataset_from_bytes,
                                dataset_to_bytes, information_coefficient,
                                load_dataset, sample_nonlinear, sample_spiked,
                                save_dataset)


def rademacher(r):
    return SpikePrior.rademacher(r)


def test_zero_snr_is_pure_noise():
    n, d = 400, 300
    data = sample_spiked(n, d, rademacher(1), rademacher(1), [0.0], seed=0)
    assert abs(data.X.mean()) < 4.0 / np.sqrt(n * d)
    # per-entry variance within 5 standard errors of 1 (SE of var ~ sqrt(2/nd))
    assert abs(data.X.var() - 1.0) < 5.0 * np.sqrt(2.0 / (n * d))


def test_alpha_and_shapes():
    data = sample_spiked(60, 40, rademacher(2), rademacher(2), [1.0, 0.5], seed=1)
    assert data.alpha == 60 / 40
    assert data.X.shape == (60, 40)
    assert data.U_star.shape == (60, 2)
    assert data.W_star.shape == (40, 2)


def test_determinism_and_seed_sensitivity():
    args = (50, 30, rademacher(1), rademacher(1), [1.0])
    a = sample_spiked(*args, seed=7)
    b = sample_spiked(*args, seed=7)
    c = sample_spiked(*args, seed=8)
    assert np.array_equal(a.X, b.X)
    assert not np.array_equal(a.X, c.X)


def test_row_keyed_rng_is_size_independent():
    # the first rows of a taller matrix coincide with the shorter one
    small = sample_spiked(20, 30, rademacher(1), rademacher(1), [1.0], seed=3)
    tall = sample_spiked(40, 30, rademacher(1), rademacher(1), [1.0], seed=3)
    assert np.array_equal(small.X, tall.X[:20])


def test_top_singular_value_grows_with_snr():
    kw = dict(n=200, d=200, prior_u=rademacher(1), prior_w=rademacher(1), seed=5)
    spiked = sample_spiked(Lambda=[5.0], **kw)
    flat = sample_spiked(Lambda=[0.0], **kw)
    s_spiked = svds(spiked.X / np.sqrt(200), k=1, return_singular_vectors=False)[0]
    s_flat = svds(flat.X / np.sqrt(200), k=1, return_singular_vectors=False)[0]
    assert s_spiked > s_flat


def test_planted_signal_consistency():
    d = 2000
    data = sample_spiked(100, d, rademacher(2), rademacher(2), [1.0, 1.0], seed=2)
    gram = data.W_star.T @ data.W_star / d
    assert np.max(np.abs(gram - np.eye(2))) < 5.0 / np.sqrt(d)


def test_capacity_refusal():
    with pytest.raises(CapacityError):
        sample_spiked(1 << 16, 1 << 16, rademacher(1), rademacher(1), [1.0], seed=0)


def test_degenerate_sizes_rejected():
    with pytest.raises(ValidationError):
        sample_spiked(0, 10, rademacher(1), rademacher(1), [1.0], seed=0)
    with pytest.raises(ValidationError):
        sample_spiked(10, 10, rademacher(1), rademacher(1), [-1.0], seed=0)


def test_prior_validation():
    with pytest.raises(ValidationError):
        SpikePrior.discrete(1, [1.0, -1.0], [0.7, 0.2])
    with pytest.raises(ValidationError):
        SpikePrior.gaussian(1, variance=0.0)


# --- nonlinear model ---------------------------------------------------------


def test_identity_reduces_to_linear():
    a = sample_spiked(40, 30, rademacher(1), rademacher(1), [1.3], seed=9)
    b = sample_nonlinear(40, 30, rademacher(1), rademacher(1), [1.3],
                         Nonlinearity.identity(), seed=9)
    assert np.array_equal(a.X, b.X)


def test_unnormalized_refused():
    with pytest.raises(ValidationError):
        sample_nonlinear(20, 20, rademacher(1), rademacher(1), [1.0],
                         Nonlinearity.tanh(), seed=0)


def test_nonlinear_centering():
    F = Nonlinearity.tanh().normalized()
    data = sample_nonlinear(300, 200, rademacher(1), rademacher(1), [0.0], F, seed=4)
    assert abs(data.X.mean()) < 4.0 / np.sqrt(300 * 200)


def test_effective_snr_recorded():
    F = Nonlinearity.tanh().normalized()
    lam, alpha = 2.0, 2.0
    data = sample_nonlinear(400, 200, rademacher(1), rademacher(1), [lam], F, seed=4)
    theta1 = information_coefficient(F, 1)
    assert np.allclose(data.effective_snr, np.sqrt(alpha) * lam * theta1)


def test_information_coefficients_identity():
    F = Nonlinearity.identity()
    assert information_coefficient(F, 1) == pytest.approx(1.0, abs=1e-12)
    assert information_coefficient(F, 0) == pytest.approx(0.0, abs=1e-12)


def test_information_coefficient_tanh_against_oracle():
    # independent oracle: 200-node Gauss-Hermite of sech^2 under N(0,1)
    x, w = hermgauss(200)
    z = np.sqrt(2.0) * x
    oracle = float(np.sum((w / np.sqrt(np.pi)) / np.cosh(z) ** 2))
    got = information_coefficient(Nonlinearity.tanh(), 1)
    assert got == pytest.approx(oracle, abs=1e-9)
    assert got == pytest.approx(0.6057, abs=2e-4)


def test_normalized_tanh_has_unit_variance():
    F = Nonlinearity.tanh().normalized()
    assert F.is_normalized(tol=1e-8)
    # finite-difference derivative path agrees with the analytic one
    F_fd = Nonlinearity.custom(np.tanh).normalized()
    assert information_coefficient(F_fd, 1) == pytest.approx(
        information_coefficient(F, 1), abs=1e-7)


def test_spectral_residual_shrinks_with_n():
    # the nonlinear model approaches centered F(noise) plus a rank-1 mean shift
    F = Nonlinearity.tanh().normalized()
    lam, alpha = 1.5, 2.0
    theta1 = information_coefficient(F, 1)
    norms = {}
    for n in (500, 1000, 2000):
        d = n // 2
        meds = []
        for seed in (0, 1, 2):
            data = sample_nonlinear(n, d, rademacher(1), rademacher(1), [lam], F,
                                    seed=seed)
            # rebuild the noise with the same row-keyed stream
            from rbmlab import rng as _rng
            Z = np.empty((n, d))
            for i in range(n):
                Z[i] = _rng.row_generator(seed, _rng.STREAM_NOISE, i).standard_normal(d)
            base = (F(Z) - F.theta0) / np.sqrt(n)
            signal = (np.sqrt(alpha) * theta1 / n) * (data.U_star * lam) @ data.W_star.T
            resid = data.X / np.sqrt(n) - base - signal
            meds.append(svds(resid, k=1, return_singular_vectors=False)[0])
        norms[n] = float(np.median(meds))
    assert norms[2000] < norms[1000] < norms[500]


# --- container ----------------------------------------------------------------


def test_container_roundtrip(tmp_path):
    data = sample_spiked(30, 20, rademacher(2), rademacher(2), [1.5, 0.5], seed=6)
    path = tmp_path / "data.spkd"
    save_dataset(data, str(path))
    back = load_dataset(str(path))
    assert np.array_equal(back.X, data.X)
    assert np.array_equal(back.U_star, data.U_star)
    assert np.array_equal(back.W_star, data.W_star)
    assert np.array_equal(back.Lambda, data.Lambda)
    assert back.seed == data.seed and back.alpha == data.alpha
    # byte-level determinism
    assert dataset_to_bytes(back) == dataset_to_bytes(data)


def test_container_magic_checked():
    with pytest.raises(ValidationError):
        dataset_from_bytes(b"NOPE!" + b"\x00" * 64)
