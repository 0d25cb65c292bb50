"""Effective high-dimensional training objective for an RBM with few hidden
units.

The objective splits into a data term eta1 evaluated on the k projections
x_mu^T W / sqrt(n) and a penalty term eta2 evaluated on the k x k overlap
Q(W) = W^T W / d:

    objective(W, theta, b)
        = sum_mu eta1(x_mu^T W / sqrt(n), x_mu^T theta / sqrt(n), b)
          - n * eta2(W^T W / d, W^T theta / d, theta^T theta / d, b).

Both eta functions are log-partition functions of the (finite-support) hidden
prior, computed by stabilized log-sum-exp over the support.

Gradient convention: grad_eta2 returns the matrix of partial derivatives of
eta2 in its matrix argument, which is half the tilted second moment
<h h^T>/2.  The chain rule through Q(W) doubles it, so the W-gradient of the
full objective carries the full second moment:

    grad objective = sum_mu grad_eta1(.)/sqrt(n) (x) x_mu
                     - alpha * W * <h h^T>_Q(W).

This is the convention under which the gradient matches finite differences of
the objective and vanishes at AMP fixed points.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import CapacityError, ValidationError
from .spiked_data import SpikedDataset

MAX_SUPPORT = 1 << 22
MAX_EXACT_D = 22

_TOL_WEIGHTS = 1e-12
_TOL_SYM = 1e-12


@dataclass(frozen=True)
class HiddenPrior:
    """Finite-support prior over the k hidden units.

    points: (S, k) support, weights: (S,).  Separable priors remember their
    per-unit support so diagonal fast paths can work one unit at a time.
    """

    points: np.ndarray
    weights: np.ndarray
    k: int
    unit_points: Optional[np.ndarray] = None
    unit_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        wts = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.k or pts.shape[0] != wts.shape[0]:
            raise ValidationError("support must be (S, k) with matching weights")
        if pts.shape[0] > MAX_SUPPORT:
            raise CapacityError(f"support size {pts.shape[0]} exceeds {MAX_SUPPORT}")
        if np.any(wts <= 0) or abs(wts.sum() - 1.0) > _TOL_WEIGHTS:
            raise ValidationError("weights must be positive and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @classmethod
    def rademacher(cls, k: int) -> "HiddenPrior":
        return cls.separable(k, np.array([-1.0, 1.0]), np.array([0.5, 0.5]))

    @classmethod
    def separable(cls, k: int, unit_points, unit_weights) -> "HiddenPrior":
        """Product of k identical per-unit supports."""
        up = np.asarray(unit_points, dtype=float)
        uw = np.asarray(unit_weights, dtype=float)
        if len(up) ** k > MAX_SUPPORT:
            raise CapacityError(f"{len(up)}^{k} support points exceed {MAX_SUPPORT}")
        combos = np.array(list(itertools.product(up, repeat=k)), dtype=float)
        wcombos = np.array([np.prod(ws) for ws in itertools.product(uw, repeat=k)])
        return cls(points=combos.reshape(-1, k), weights=wcombos, k=k,
                   unit_points=up, unit_weights=uw)

    @property
    def separable_units(self) -> bool:
        return self.unit_points is not None

    def is_symmetric(self) -> bool:
        """Support closed under h -> -h with matched weights."""
        if self.separable_units:
            order = np.argsort(self.unit_points)
            return (np.allclose(self.unit_points[order],
                                -self.unit_points[order][::-1], atol=1e-12)
                    and np.allclose(self.unit_weights[order],
                                    self.unit_weights[order][::-1], atol=1e-12))
        key = {tuple(np.round(p, 12)): w for p, w in zip(self.points, self.weights)}
        return all(abs(key.get(tuple(np.round(-p, 12)), -1.0) - w) < 1e-12
                   for p, w in zip(self.points, self.weights))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.points)))


@dataclass(frozen=True)
class EffectiveModel:
    """Hidden prior plus the sample ratio alpha = n/d."""

    hidden_prior: HiddenPrior
    alpha: float
    include_biases: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")

    @property
    def k(self) -> int:
        return self.hidden_prior.k


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"{name}: non-finite input")


# --- eta1 and its derivatives (vectorized over rows) -------------------------

def eta1_rows(X_W: np.ndarray, x_theta, b, model: EffectiveModel) -> np.ndarray:
    """eta1 for a batch of projection rows; X_W is (n, k), returns (n,)."""
    prior = model.hidden_prior
    sa = np.sqrt(model.alpha)
    logits = (sa * X_W + b) @ prior.points.T + np.log(prior.weights)
    return logsumexp(logits, axis=1) + sa * np.asarray(x_theta)


def eta1(x_W, x_theta: float, b, model: EffectiveModel) -> float:
    """log E_h exp(h^T (sqrt(alpha) x_W + b)) + sqrt(alpha) x_theta."""
    x_W = np.atleast_1d(np.asarray(x_W, dtype=float))
    b = np.zeros(model.k) if b is None else np.asarray(b, dtype=float)
    _check_finite("eta1", x_W, b)
    return float(eta1_rows(x_W[None, :], float(x_theta), b, model)[0])


def _tilted_rows(X_W, b, model):
    """Softmax weights over the hidden support for each row."""
    prior = model.hidden_prior
    sa = np.sqrt(model.alpha)
    logits = (sa * X_W + b) @ prior.points.T + np.log(prior.weights)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p


def grad_eta1_rows(X_W: np.ndarray, b, model: EffectiveModel) -> np.ndarray:
    """sqrt(alpha) <h> under the tilted prior, per row; (n, k)."""
    p = _tilted_rows(X_W, b, model)
    return np.sqrt(model.alpha) * (p @ model.hidden_prior.points)


def hess_eta1_rows(X_W: np.ndarray, b, model: EffectiveModel) -> np.ndarray:
    """alpha * tilted covariance of h, per row; (n, k, k)."""
    prior = model.hidden_prior
    p = _tilted_rows(X_W, b, model)
    mean = p @ prior.points
    second = np.einsum("ns,si,sj->nij", p, prior.points, prior.points)
    return model.alpha * (second - mean[:, :, None] * mean[:, None, :])


def grad_eta1(x_W, x_theta, b, model: EffectiveModel):
    """(d eta1/d x_W, d eta1/d x_theta, d eta1/d b).

    The x_W block is sqrt(alpha) <h>; the x_theta derivative is sqrt(alpha)
    identically; the b block is the tilted mean <h>.
    """
    x_W = np.atleast_1d(np.asarray(x_W, dtype=float))
    b = np.zeros(model.k) if b is None else np.asarray(b, dtype=float)
    g = grad_eta1_rows(x_W[None, :], b, model)[0]
    return g, np.sqrt(model.alpha), g / np.sqrt(model.alpha)


# --- eta2 and its derivatives -------------------------------------------------

def _eta2_logits(Q_W, b, model, Q_Wtheta=None, Q_theta=0.0):
    prior = model.hidden_prior
    Q_W = np.atleast_2d(np.asarray(Q_W, dtype=float))
    if np.max(np.abs(Q_W - Q_W.T)) > 100 * _TOL_SYM * max(1.0, np.max(np.abs(Q_W))):
        raise ValidationError("Q_W must be symmetric")
    quad = 0.5 * np.einsum("si,ij,sj->s", prior.points, Q_W, prior.points)
    lin = prior.points @ (np.zeros(model.k) if b is None else np.asarray(b, dtype=float))
    if Q_Wtheta is not None:
        lin = lin + prior.points @ np.asarray(Q_Wtheta, dtype=float)
    return np.log(prior.weights) + lin + quad + 0.5 * float(Q_theta)


def eta2(Q_W, b, model: EffectiveModel, Q_Wtheta=None, Q_theta: float = 0.0) -> float:
    """log E_h exp(h^T b + (h^T Q_W h + 2 h^T Q_Wtheta + Q_theta)/2)."""
    return float(logsumexp(_eta2_logits(Q_W, b, model, Q_Wtheta, Q_theta)))


def _eta2_tilt(Q_W, b, model, Q_Wtheta=None, Q_theta=0.0):
    logits = _eta2_logits(Q_W, b, model, Q_Wtheta, Q_theta)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def grad_eta2(Q_W, b, model: EffectiveModel, Q_Wtheta=None, Q_theta: float = 0.0) -> np.ndarray:
    """Matrix of partials of eta2 in Q_W: half the tilted second moment."""
    p = _eta2_tilt(Q_W, b, model, Q_Wtheta, Q_theta)
    pts = model.hidden_prior.points
    return 0.5 * np.einsum("s,si,sj->ij", p, pts, pts)


def grad_eta2_full(Q_W, b, model: EffectiveModel, Q_Wtheta=None, Q_theta: float = 0.0):
    """All four blocks: (d/dQ_W, d/dQ_Wtheta, d/dQ_theta, d/db)."""
    p = _eta2_tilt(Q_W, b, model, Q_Wtheta, Q_theta)
    pts = model.hidden_prior.points
    mean = p @ pts
    return (0.5 * np.einsum("s,si,sj->ij", p, pts, pts), mean, 0.5, mean)


def hidden_second_moment(Q_W, b, model: EffectiveModel, Q_Wtheta=None,
                         Q_theta: float = 0.0) -> np.ndarray:
    """<h h^T> under the eta2 tilt; equals twice grad_eta2."""
    return 2.0 * grad_eta2(Q_W, b, model, Q_Wtheta, Q_theta)


# --- the effective objective ---------------------------------------------------

def overlap_arguments(W, theta, d):
    Q_W = W.T @ W / d
    Q_Wtheta = None if theta is None else W.T @ theta / d
    Q_theta = 0.0 if theta is None else float(theta @ theta) / d
    return Q_W, Q_Wtheta, Q_theta


def effective_loglik(W: np.ndarray, data: SpikedDataset, model: EffectiveModel,
                     theta=None, b=None) -> float:
    """Data term minus n times the overlap penalty.

    W is (d, k); theta an optional visible bias (d,); b an optional hidden
    bias (k,).
    """
    n, d = data.n, data.d
    W = np.asarray(W, dtype=float)
    if W.shape != (d, model.k):
        raise ValidationError(f"W must be ({d}, {model.k}), got {W.shape}")
    if theta is not None and np.asarray(theta).shape != (d,):
        raise ValidationError("theta must be a d-vector")
    b_arr = np.zeros(model.k) if b is None else np.asarray(b, dtype=float)
    X_W = data.X @ W / np.sqrt(n)
    x_theta = 0.0 if theta is None else data.X @ theta / np.sqrt(n)
    data_term = float(np.sum(eta1_rows(X_W, x_theta, b_arr, model)))
    Q_W, Q_Wtheta, Q_theta = overlap_arguments(W, theta, d)
    return data_term - n * eta2(Q_W, b_arr, model, Q_Wtheta, Q_theta)


def effective_grad(W: np.ndarray, data: SpikedDataset, model: EffectiveModel) -> np.ndarray:
    """W-gradient of the biasless objective, shape (d, k).

    Equals sum_mu grad_eta1(x_mu^T W/sqrt(n))/sqrt(n) (x) x_mu
    minus alpha * W <h h^T>_Q(W); matches finite differences of
    effective_loglik and vanishes at AMP fixed points.
    """
    n, d = data.n, data.d
    W = np.asarray(W, dtype=float)
    if W.shape != (d, model.k):
        raise ValidationError(f"W must be ({d}, {model.k}), got {W.shape}")
    X_W = data.X @ W / np.sqrt(n)
    G1 = data.X.T @ grad_eta1_rows(X_W, np.zeros(model.k), model) / np.sqrt(n)
    M2 = hidden_second_moment(W.T @ W / d, None, model)
    return G1 - model.alpha * W @ M2


def stationarity_residual(W: np.ndarray, data: SpikedDataset, model: EffectiveModel) -> float:
    """Frobenius norm of the gradient scaled by sqrt(d k)."""
    g = effective_grad(W, data, model)
    return float(np.linalg.norm(g)) / np.sqrt(W.shape[0] * W.shape[1])


# --- exact tiny-d oracle --------------------------------------------------------

def _enumerate_pm1(d, chunk=1 << 18):
    """Yield chunks of all sign vectors in {-1,+1}^d as float arrays."""
    total = 1 << d
    cols = np.arange(d, dtype=np.uint32)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.uint64)
        bits = (idx[:, None] >> cols[None, :]) & 1
        yield 2.0 * bits.astype(float) - 1.0


def exact_loglik_small(W: np.ndarray, data: SpikedDataset, model: EffectiveModel) -> float:
    """Exact log-likelihood ratio for Rademacher visible units by 2^d enumeration.

    Computes sum_mu log E_h exp(x_mu^T W h / sqrt(d)) - n log Z(W), with
    Z(W) = E_v E_h exp(v^T W h / sqrt(d)) enumerated over all visible sign
    configurations.  Refuses d above MAX_EXACT_D.
    """
    n, d = data.n, data.d
    if d > MAX_EXACT_D:
        raise CapacityError(f"exact enumeration limited to d <= {MAX_EXACT_D}")
    W = np.asarray(W, dtype=float)
    prior = model.hidden_prior
    proj = data.X @ W / np.sqrt(d)
    logits = proj @ prior.points.T + np.log(prior.weights)
    data_term = float(np.sum(logsumexp(logits, axis=1)))

    # log Z = logsumexp over (v, h) of v^T W h / sqrt(d), uniform over v.
    pieces = []
    for V in _enumerate_pm1(d):
        inner = (V @ W) @ prior.points.T / np.sqrt(d) + np.log(prior.weights)
        pieces.append(logsumexp(inner))
    log_z = logsumexp(np.array(pieces)) - d * np.log(2.0)
    return data_term - n * log_z
