"""Spiked covariance data generation.

The linear model is X = U* L W*^T / sqrt(d) + Z with i.i.d. standard Gaussian
noise Z, diagonal SNR matrix L, and spike rows drawn i.i.d. from scalar priors
applied coordinatewise.  The nonlinear variant applies an elementwise map F to
the linear model and recenters; its information coefficients give the
effective SNR sqrt(alpha) * L * theta1(F) of the equivalent linear model.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as _rng
from .errors import CapacityError, NumericalError, ValidationError
from .numutil import gauss_normal_grid, gh_nodes

# Generating more than this many matrix entries in one dataset is refused.
MAX_ENTRIES = 1 << 27

_TOL_WEIGHTS = 1e-12
_TOL_NORMALIZATION = 1e-8


@dataclass(frozen=True)
class SpikePrior:
    """Scalar prior applied i.i.d. to each of the r spike coordinates.

    kind is one of "rademacher", "gaussian", "discrete".  Discrete priors
    carry an explicit support; gaussian priors a variance.
    """

    kind: str
    r: int
    variance: float = 1.0
    points: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.r < 1:
            raise ValidationError("spike dimension r must be >= 1")
        if self.kind == "gaussian":
            if not self.variance > 0:
                raise ValidationError("gaussian prior needs variance > 0")
        elif self.kind == "discrete":
            pts = np.asarray(self.points, dtype=float)
            wts = np.asarray(self.weights, dtype=float)
            if pts.ndim != 1 or pts.shape != wts.shape:
                raise ValidationError("discrete prior needs matching 1-d points/weights")
            if np.any(wts < 0) or abs(wts.sum() - 1.0) > _TOL_WEIGHTS:
                raise ValidationError("discrete prior weights must be >= 0 and sum to 1")
            object.__setattr__(self, "points", pts)
            object.__setattr__(self, "weights", wts)
        elif self.kind != "rademacher":
            raise ValidationError(f"unknown prior kind {self.kind!r}")

    @classmethod
    def rademacher(cls, r: int) -> "SpikePrior":
        return cls(kind="rademacher", r=r)

    @classmethod
    def gaussian(cls, r: int, variance: float = 1.0) -> "SpikePrior":
        return cls(kind="gaussian", r=r, variance=variance)

    @classmethod
    def discrete(cls, r: int, points, weights) -> "SpikePrior":
        return cls(kind="discrete", r=r, points=np.asarray(points, dtype=float),
                   weights=np.asarray(weights, dtype=float))

    def second_moment(self) -> float:
        if self.kind == "rademacher":
            return 1.0
        if self.kind == "gaussian":
            return float(self.variance)
        return float(np.sum(self.weights * self.points ** 2))

    def mean(self) -> float:
        if self.kind in ("rademacher", "gaussian"):
            return 0.0
        return float(np.sum(self.weights * self.points))

    def is_symmetric(self) -> bool:
        if self.kind in ("rademacher", "gaussian"):
            return True
        pts, wts = self.points, self.weights
        order = np.argsort(pts)
        return (np.allclose(pts[order], -pts[order][::-1], atol=1e-12)
                and np.allclose(wts[order], wts[order][::-1], atol=1e-12))

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        """Scalar support and weights (Gauss-Hermite nodes for gaussian)."""
        if self.kind == "rademacher":
            return np.array([-1.0, 1.0]), np.array([0.5, 0.5])
        if self.kind == "discrete":
            return self.points.copy(), self.weights.copy()
        z, w = gauss_normal_grid(200)
        return np.sqrt(self.variance) * z, w

    def sample_rows(self, n_rows: int, seed: int, stream: int) -> np.ndarray:
        """(n_rows, r) i.i.d. draws, keyed per row for reproducibility."""
        out = np.empty((n_rows, self.r))
        for i in range(n_rows):
            g = _rng.row_generator(seed, stream, i)
            if self.kind == "rademacher":
                out[i] = g.choice([-1.0, 1.0], size=self.r)
            elif self.kind == "gaussian":
                out[i] = np.sqrt(self.variance) * g.standard_normal(self.r)
            else:
                out[i] = g.choice(self.points, size=self.r, p=self.weights)
        return out


@dataclass
class Nonlinearity:
    """Elementwise map applied to the linear spiked model.

    The coefficients theta0 = E F(Z) and theta1 = E F'(Z) under Z ~ N(0,1) are
    cached after estimation.  A map is "normalized" when Var F(Z) = 1; only
    normalized maps may generate data.
    """

    kind: str
    fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    dfn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    theta0: Optional[float] = None
    theta1: Optional[float] = None
    quadrature_nodes: int = 201
    _scale: float = field(default=1.0, repr=False)
    _shift: float = field(default=0.0, repr=False)

    @classmethod
    def identity(cls) -> "Nonlinearity":
        return cls(kind="identity", fn=lambda x: x, dfn=lambda x: np.ones_like(x),
                   theta0=0.0, theta1=1.0)

    @classmethod
    def tanh(cls) -> "Nonlinearity":
        nl = cls(kind="tanh", fn=np.tanh, dfn=lambda x: 1.0 / np.cosh(x) ** 2)
        return nl

    @classmethod
    def custom(cls, fn, dfn=None) -> "Nonlinearity":
        return cls(kind="custom", fn=fn, dfn=dfn)

    def __call__(self, x):
        return (self.fn(x) - self._shift) / self._scale

    def variance_under_gaussian(self) -> float:
        m2 = information_coefficient(self, order=0, of_square=True)
        m1 = information_coefficient(self, order=0)
        return m2 - m1 ** 2

    def is_normalized(self, tol: float = _TOL_NORMALIZATION) -> bool:
        return abs(self.variance_under_gaussian() - 1.0) <= tol

    def normalized(self) -> "Nonlinearity":
        """Affinely rescaled copy with E F(Z) = 0 and Var F(Z) = 1."""
        m1 = information_coefficient(self, order=0)
        var = self.variance_under_gaussian()
        if not np.isfinite(var) or var <= 0:
            raise NumericalError("cannot normalize: variance under N(0,1) is not positive")
        out = Nonlinearity(kind=self.kind, fn=self.fn, dfn=self.dfn,
                           quadrature_nodes=self.quadrature_nodes,
                           _scale=self._scale * np.sqrt(var),
                           _shift=self._shift + m1 * self._scale)
        out.theta0 = information_coefficient(out, order=0)
        out.theta1 = information_coefficient(out, order=1)
        return out


def information_coefficient(F: Nonlinearity, order: int, quadrature_nodes: int | None = None,
                            of_square: bool = False) -> float:
    """E[F^(order)(Z)] for Z ~ N(0,1) by Gauss-Hermite quadrature.

    order 0 returns E F(Z) (or E F(Z)^2 when of_square); order 1 returns
    E F'(Z), using the analytic derivative when the map carries one and a
    central difference at step 1e-5 otherwise.
    """
    if order not in (0, 1):
        raise ValidationError("only orders 0 and 1 are defined")
    z, w = gh_nodes(quadrature_nodes or F.quadrature_nodes)
    if order == 0:
        vals = F(z) ** 2 if of_square else F(z)
    else:
        if F.dfn is not None:
            vals = F.dfn(z) / F._scale
        else:
            h = 1e-5
            vals = (F(z + h) - F(z - h)) / (2.0 * h)
    total = float(np.sum(w * vals))
    if not np.isfinite(total):
        raise NumericalError("quadrature sum is not finite")
    return total


@dataclass(frozen=True)
class SpikedDataset:
    """Data matrix with its planted spikes and generation metadata."""

    X: np.ndarray          # (n, d)
    U_star: np.ndarray     # (n, r)
    W_star: np.ndarray     # (d, r)
    Lambda: np.ndarray     # (r,) diagonal SNR entries
    alpha: float
    seed: int
    effective_snr: np.ndarray = None  # (r,), sqrt(alpha)*Lambda*theta1(F)

    def __post_init__(self):
        n, d = self.X.shape
        if self.U_star.shape[0] != n or self.W_star.shape[0] != d:
            raise ValidationError("spike shapes inconsistent with X")
        if self.effective_snr is None:
            object.__setattr__(self, "effective_snr",
                               np.sqrt(self.alpha) * np.asarray(self.Lambda, dtype=float))
        for a in (self.X, self.U_star, self.W_star):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return self.W_star.shape[1]


def _check_sizes(n, d, Lambda, prior_u, prior_w):
    if n < 1 or d < 1:
        raise ValidationError("n and d must be >= 1")
    if n * d > MAX_ENTRIES:
        raise CapacityError(f"n*d = {n * d} exceeds the {MAX_ENTRIES}-entry budget")
    Lambda = np.atleast_1d(np.asarray(Lambda, dtype=float))
    if Lambda.ndim == 2:
        Lambda = np.diag(Lambda)
    if np.any(Lambda < 0):
        raise ValidationError("SNR entries must be >= 0")
    r = Lambda.shape[0]
    if prior_u.r != r or prior_w.r != r:
        raise ValidationError("prior dimension must equal the number of SNR entries")
    return Lambda, r


def sample_spiked(n: int, d: int, prior_u: SpikePrior, prior_w: SpikePrior,
                  Lambda, seed: int) -> SpikedDataset:
    """Draw X = U* L W*^T / sqrt(d) + Z with row-keyed reproducible randomness."""
    Lambda, r = _check_sizes(n, d, Lambda, prior_u, prior_w)
    U = prior_u.sample_rows(n, seed, _rng.STREAM_U)
    W = prior_w.sample_rows(d, seed, _rng.STREAM_W)
    X = (U * Lambda) @ W.T / np.sqrt(d)
    for i in range(n):
        X[i] += _rng.row_generator(seed, _rng.STREAM_NOISE, i).standard_normal(d)
    return SpikedDataset(X=X, U_star=U, W_star=W, Lambda=Lambda,
                         alpha=n / d, seed=seed)


def sample_nonlinear(n: int, d: int, prior_u: SpikePrior, prior_w: SpikePrior,
                     Lambda, F: Nonlinearity, seed: int,
                     noise: str = "gaussian") -> SpikedDataset:
    """Draw X = F(U* L W*^T / sqrt(d) + Z) - E F(Z) for a normalized map F.

    The dataset's effective_snr records sqrt(alpha) * Lambda * theta1(F), the
    SNR of the asymptotically equivalent linear model.  Only standard Gaussian
    noise is supported; the information coefficients are defined against it.
    """
    if noise != "gaussian":
        raise ValidationError("only gaussian noise is supported")
    Lambda, r = _check_sizes(n, d, Lambda, prior_u, prior_w)
    if F.kind == "identity":
        return sample_spiked(n, d, prior_u, prior_w, Lambda, seed)
    if not F.is_normalized():
        raise ValidationError(
            "nonlinearity is not normalized (Var F(Z) != 1); call .normalized() first")
    theta0 = F.theta0 if F.theta0 is not None else information_coefficient(F, 0)
    theta1 = F.theta1 if F.theta1 is not None else information_coefficient(F, 1)
    U = prior_u.sample_rows(n, seed, _rng.STREAM_U)
    W = prior_w.sample_rows(d, seed, _rng.STREAM_W)
    X = (U * Lambda) @ W.T / np.sqrt(d)
    for i in range(n):
        X[i] += _rng.row_generator(seed, _rng.STREAM_NOISE, i).standard_normal(d)
    X = F(X) - theta0
    alpha = n / d
    return SpikedDataset(X=X, U_star=U, W_star=W, Lambda=Lambda, alpha=alpha,
                         seed=seed,
                         effective_snr=np.sqrt(alpha) * Lambda * theta1)


# --- binary container -------------------------------------------------------

_MAGIC = b"SPKD1"


def save_dataset(data: SpikedDataset, path_or_file) -> None:
    """Write the binary container: magic, n, d, r, seed, Lambda, X, U*, W*."""
    own = isinstance(path_or_file, (str, bytes))
    f = open(path_or_file, "wb") if own else path_or_file
    try:
        f.write(_MAGIC)
        f.write(struct.pack("<qqqq", data.n, data.d, data.r, data.seed))
        f.write(np.asarray(data.Lambda, dtype="<f8").tobytes())
        for a in (data.X, data.U_star, data.W_star):
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    finally:
        if own:
            f.close()


def load_dataset(path_or_file) -> SpikedDataset:
    own = isinstance(path_or_file, (str, bytes))
    f = open(path_or_file, "rb") if own else path_or_file
    try:
        if f.read(5) != _MAGIC:
            raise ValidationError("not a spiked-dataset container (bad magic)")
        n, d, r, seed = struct.unpack("<qqqq", f.read(32))
        Lambda = np.frombuffer(f.read(8 * r), dtype="<f8").copy()
        X = np.frombuffer(f.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        U = np.frombuffer(f.read(8 * n * r), dtype="<f8").reshape(n, r).copy()
        W = np.frombuffer(f.read(8 * d * r), dtype="<f8").reshape(d, r).copy()
    finally:
        if own:
            f.close()
    return SpikedDataset(X=X, U_star=U, W_star=W, Lambda=Lambda,
                         alpha=n / d, seed=seed)


def dataset_to_bytes(data: SpikedDataset) -> bytes:
    buf = io.BytesIO()
    save_dataset(data, buf)
    return buf.getvalue()


def dataset_from_bytes(blob: bytes) -> SpikedDataset:
    return load_dataset(io.BytesIO(blob))
