"""Gaussian factors in natural and moment form.

Factors may carry leading block axes: ``r`` of shape ``(..., D)`` and ``lam``
of shape ``(..., D, D)`` describe a block-diagonal Gaussian whose blocks are
independent.  Products, quotients and powers act elementwise on the natural
parameters, so the block structure is preserved for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, NotNormalizable

JITTER = (0.0, 1e-9, 1e-7)


def _sym(a):
    return (a + np.swapaxes(a, -1, -2)) * 0.5


_EYE = {}


def _eye(d):
    if d not in _EYE:
        _EYE[d] = np.eye(d)
    return _EYE[d]


@dataclass(frozen=True)
class GaussianNatural:
    """Gaussian factor ``exp(r.theta - theta' lam theta / 2)``.

    ``lam`` need not be positive definite; site factors routinely are not.
    """

    r: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        lam = np.asarray(self.lam, dtype=float)
        if lam.shape != r.shape + r.shape[-1:]:
            raise DimensionMismatch(f"r {r.shape} incompatible with lam {lam.shape}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def unit(cls, dim: int, blocks: tuple = ()) -> "GaussianNatural":
        return cls(np.zeros(blocks + (dim,)), np.zeros(blocks + (dim, dim)))

    @property
    def dim(self) -> int:
        return self.r.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.r.shape

    @property
    def n_params(self) -> int:
        return self.r.size + self.lam.size

    def is_normalizable(self) -> bool:
        try:
            _cholesky(self.lam)
        except NotNormalizable:
            return False
        return True

    def allclose(self, other, atol=1e-12) -> bool:
        return (np.allclose(self.r, other.r, rtol=0, atol=atol)
                and np.allclose(self.lam, other.lam, rtol=0, atol=atol))

    def max_abs_diff(self, other) -> float:
        return float(max(np.max(np.abs(self.r - other.r), initial=0.0),
                         np.max(np.abs(self.lam - other.lam), initial=0.0)))


@dataclass(frozen=True)
class GaussianMoment:
    """Normalizable Gaussian with mean and covariance (block axes allowed)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != mean.shape + mean.shape[-1:]:
            raise DimensionMismatch(f"mean {mean.shape} incompatible with cov {cov.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.mean.shape

    def block_diag(self) -> "GaussianMoment":
        """Flatten block axes into one joint Gaussian with block-diagonal cov."""
        if self.mean.ndim == 1:
            return self
        d = self.dim
        blocks = self.cov.reshape(-1, d, d)
        b = len(blocks)
        cov = np.zeros((b * d, b * d))
        for i, c in enumerate(blocks):
            cov[i * d:(i + 1) * d, i * d:(i + 1) * d] = c
        return GaussianMoment(self.mean.reshape(-1), cov)


@dataclass(frozen=True)
class CategoricalDist:
    """Distribution over J outcomes stored as (possibly unnormalized) logs."""

    log_weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "log_weights", np.asarray(self.log_weights, dtype=float))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(categorical_normalize(self).log_weights)


def _cholesky(a):
    eye = _eye(a.shape[-1])
    for jitter in JITTER:
        try:
            return np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    raise NotNormalizable("matrix is not positive definite")


def _check_dims(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"factor shapes differ: {a.shape} vs {b.shape}")


def to_moments(g: GaussianNatural) -> GaussianMoment:
    """Convert natural parameters to mean/covariance.

    Raises
    ------
    NotNormalizable
        If ``lam`` is not positive definite even after diagonal jitter.
    """
    lam = _sym(g.lam)
    linv = np.linalg.inv(_cholesky(lam))
    cov = _sym(np.swapaxes(linv, -1, -2) @ linv)
    mean = (cov @ g.r[..., None])[..., 0]
    return GaussianMoment(mean, cov)


def to_natural(m: GaussianMoment) -> GaussianNatural:
    cov = _sym(m.cov)
    linv = np.linalg.inv(_cholesky(cov))
    lam = _sym(np.swapaxes(linv, -1, -2) @ linv)
    r = (lam @ m.mean[..., None])[..., 0]
    return GaussianNatural(r, lam)


def factor_multiply(a: GaussianNatural, b: GaussianNatural) -> GaussianNatural:
    _check_dims(a, b)
    return GaussianNatural(a.r + b.r, _sym(a.lam + b.lam))


def factor_divide(a: GaussianNatural, b: GaussianNatural) -> GaussianNatural:
    """Quotient ``a / b``; the result may well be non-normalizable."""
    _check_dims(a, b)
    return GaussianNatural(a.r - b.r, _sym(a.lam - b.lam))


def factor_power(a: GaussianNatural, beta: float) -> GaussianNatural:
    return GaussianNatural(beta * a.r, _sym(beta * a.lam))


def kl_gaussian(p: GaussianMoment, q: GaussianMoment) -> float:
    """KL[p || q] in nats, summed over any block axes."""
    if p.shape != q.shape:
        raise DimensionMismatch(f"KL between shapes {p.shape} and {q.shape}")
    lp = _cholesky(_sym(p.cov))
    lq = _cholesky(_sym(q.cov))
    d = p.dim
    lq_inv = np.linalg.inv(lq)
    a = lq_inv @ lp
    diff = (lq_inv @ (q.mean - p.mean)[..., None])[..., 0]
    logdet_p = 2.0 * np.sum(np.log(np.diagonal(lp, axis1=-2, axis2=-1)), axis=-1)
    logdet_q = 2.0 * np.sum(np.log(np.diagonal(lq, axis1=-2, axis2=-1)), axis=-1)
    kl = 0.5 * (np.sum(a * a, axis=(-2, -1)) + np.sum(diff * diff, axis=-1)
                - d + logdet_q - logdet_p)
    return float(max(np.sum(kl), 0.0))


def categorical_normalize(c: CategoricalDist) -> CategoricalDist:
    lw = c.log_weights
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise DegenerateInput("log weights must be finite or -inf")
    top = np.max(lw)
    if top == -np.inf:
        raise DegenerateInput("all categorical weights are zero")
    shifted = lw - top
    return CategoricalDist(shifted - np.log(np.sum(np.exp(shifted))))
