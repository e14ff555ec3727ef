"""Site computations: moments of tilted distributions.

The tilted distribution for a site is the cavity times that site's
likelihood (raised to a power ``alpha`` for power-EP style projections).
Its moments are what a moment-matching step projects onto.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ConfigInvalid, DegenerateInput
from .expfam import (
    CategoricalDist,
    GaussianMoment,
    categorical_normalize,
)

GH_ORDER = 64
RESP_FLOOR = 1e-12
WIDE_CAVITY = 4.0
_SQRT2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def log_ndtr(z):
    """log Phi(z), evaluated through erfcx in the lower tail."""
    if np.ndim(z) == 0:
        z = float(z)
        if z < -6.0:
            return float(np.log(0.5 * special.erfcx(-z / _SQRT2)) - 0.5 * z * z)
        if z <= 0.0:
            return float(np.log(special.ndtr(z)))
        return float(np.log1p(-special.ndtr(-z)))
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    low = z < -6.0
    zl = z[low]
    out[low] = np.log(0.5 * special.erfcx(-zl / _SQRT2)) - 0.5 * zl * zl
    mid = ~low & (z <= 0.0)
    out[mid] = np.log(special.ndtr(z[mid]))
    high = z > 0.0
    out[high] = np.log1p(-special.ndtr(-z[high]))
    return out if out.ndim else float(out)


def inv_mills(z):
    """phi(z) / Phi(z) without forming either factor."""
    out = _SQRT_2_OVER_PI / special.erfcx(-z / _SQRT2)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class ProbitSite:
    x: np.ndarray
    y: int

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if self.y not in (-1, 1):
            raise ValueError(f"probit label must be -1 or +1, got {self.y!r}")
        if not np.all(np.isfinite(x)):
            raise ValueError("probit input must be finite")
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class MoGModel:
    """Isotropic mixture with known scale and weights; unknown means."""

    J: int
    sigma: float
    mean_prior: GaussianMoment
    mix: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.J < 2:
            raise ValueError("a mixture needs J >= 2 components")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        mix = np.full(self.J, 1.0 / self.J) if self.mix is None else np.asarray(self.mix, float)
        object.__setattr__(self, "mix", mix)

    @property
    def dim(self) -> int:
        return self.mean_prior.dim


@dataclass(frozen=True)
class TiltedResult:
    moments: GaussianMoment
    log_z: float


def probit_tilted_moments(cavity: GaussianMoment, site: ProbitSite) -> TiltedResult:
    """Exact moments of ``Phi(y theta'x) N(theta; mu, Sigma)``.

    With ``s^2 = x'Sigma x + 1`` and ``z = y x'mu / s`` the log normalizer is
    ``log Phi(z)``; the mean moves along ``Sigma x`` by ``y r / s`` and the
    covariance loses ``r (z + r) / s^2`` of ``Sigma x x' Sigma``, where
    ``r = phi(z) / Phi(z)``.
    """
    mu, sigma = cavity.mean, cavity.cov
    x, y = site.x, site.y
    sx = sigma @ x
    s2 = float(x @ sx) + 1.0
    s = np.sqrt(s2)
    z = y * float(x @ mu) / s
    ratio = inv_mills(z)
    mean = mu + (y * ratio / s) * sx
    cov = sigma - (ratio * (z + ratio) / s2) * np.outer(sx, sx)
    cov = 0.5 * (cov + cov.T)
    return TiltedResult(GaussianMoment(mean, cov), log_ndtr(z))


def tilted_moments_quadrature(cavity: GaussianMoment, site: ProbitSite,
                              alpha: float = 1.0, order: int = GH_ORDER) -> TiltedResult:
    """Moments of ``Phi(y theta'x)^alpha N(theta; mu, Sigma)`` by quadrature.

    The likelihood only sees ``u = theta'x``, so the integral is done on the
    scalar ``u`` and the full moments follow from the Gaussian conditional of
    ``theta`` given ``u``.

    The rule is Gauss-Hermite of the given order, centred on the mode of the
    integrand with its Laplace width.  When the cavity is much wider than the
    unit-width probit transition (``x'Sigma x > 4``) a single Hermite rule
    cannot resolve the transition, and the line is instead cut at the
    transition and at the mode into Gauss-Legendre panels of the same order.
    A site whose projection ``x'Sigma x`` is below 1e-14 leaves the cavity
    unchanged.
    """
    if not alpha > 0:
        raise ConfigInvalid("alpha must be positive")
    mu, sigma = cavity.mean, cavity.cov
    x, y = site.x, site.y
    sx = sigma @ x
    m_u = float(x @ mu)
    v_u = float(x @ sx)
    if v_u < 1e-14:
        return TiltedResult(cavity, alpha * log_ndtr(y * m_u))
    u0, curv = _tilted_mode(m_u, v_u, y, alpha)
    if v_u <= WIDE_CAVITY:
        nodes, weights = _hermgauss(order)
        scale = np.sqrt(2.0 / curv)
        u = u0 + scale * nodes
        logw = np.log(weights) + nodes**2 + np.log(scale)
    else:
        u, logw = _panel_rule(u0, curv, m_u, v_u, y, alpha, order)
    logw = logw + _log_integrand(u, m_u, v_u, y, alpha)
    log_z = float(special.logsumexp(logw))
    w = np.exp(logw - log_z)
    e_u = float(w @ u)
    var_u = float(w @ (u - e_u) ** 2)
    mean = mu + ((e_u - m_u) / v_u) * sx
    cov = sigma + ((var_u - v_u) / v_u**2) * np.outer(sx, sx)
    cov = 0.5 * (cov + cov.T)
    return TiltedResult(GaussianMoment(mean, cov), log_z)


def _log_integrand(u, m_u, v_u, y, alpha):
    return (-0.5 * (u - m_u) ** 2 / v_u - 0.5 * np.log(2.0 * np.pi * v_u)
            + alpha * log_ndtr(y * u))


def _tilted_mode(m_u, v_u, y, alpha, iters=100):
    # log Phi is concave, so Newton on the log-integrand converges
    u = m_u
    for _ in range(iters):
        r = inv_mills(y * u)
        grad = alpha * y * r - (u - m_u) / v_u
        curv = alpha * r * (y * u + r) + 1.0 / v_u
        step = grad / curv
        u += step
        if abs(step) <= 1e-12 * (1.0 + abs(u)):
            break
    r = inv_mills(y * u)
    return u, alpha * r * (y * u + r) + 1.0 / v_u


def _panel_rule(u0, curv, m_u, v_u, y, alpha, order, drop=40.0):
    g0 = _log_integrand(u0, m_u, v_u, y, alpha)

    def edge(direction):
        step = 1.0 / np.sqrt(curv)
        hi = step
        while _log_integrand(u0 + direction * hi, m_u, v_u, y, alpha) > g0 - drop:
            hi *= 2.0
        lo = 0.5 * hi if hi > step else 0.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _log_integrand(u0 + direction * mid, m_u, v_u, y, alpha) > g0 - drop:
                lo = mid
            else:
                hi = mid
        return u0 + direction * hi

    lo, hi = edge(-1.0), edge(1.0)
    cuts = {lo, u0, hi}
    if lo < 0.0 < hi:
        cuts.add(0.0)
    cuts = sorted(cuts)
    nodes, weights = _leggauss(order)
    us, logws = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        half = 0.5 * (b - a)
        us.append(a + half * (nodes + 1.0))
        logws.append(np.log(weights * half))
    return np.concatenate(us), np.concatenate(logws)


_RULES = {}


def _hermgauss(order):
    if ("h", order) not in _RULES:
        _RULES["h", order] = np.polynomial.hermite.hermgauss(order)
    return _RULES["h", order]


def _leggauss(order):
    if ("l", order) not in _RULES:
        _RULES["l", order] = np.polynomial.legendre.leggauss(order)
    return _RULES["l", order]


def mog_tilted_update(cavity_means: GaussianMoment, x: np.ndarray,
                      model: MoGModel) -> tuple[TiltedResult, CategoricalDist]:
    """Project the tilted distribution over stacked cluster means.

    ``cavity_means`` has block shape ``(J, D)``.  Summing out the cluster
    label gives a J-component mixture over the means; each component only
    updates its own block.  The mixture is matched block by block.

    Returns the matched moments and the normalized responsibilities.
    """
    m, v = cavity_means.mean, cavity_means.cov
    J, D = m.shape
    x = np.asarray(x, dtype=float)
    s = v + model.sigma**2 * np.eye(D)
    chol = np.linalg.cholesky(s)
    resid = x[None, :] - m
    sol = np.linalg.solve(s, resid[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    with np.errstate(over="ignore"):
        log_marg = (np.log(model.mix) - 0.5 * (D * np.log(2 * np.pi) + logdet
                                               + np.sum(resid * sol, axis=-1)))
    if not np.any(np.isfinite(log_marg)):
        raise DegenerateInput("all responsibilities underflow")
    log_z = float(special.logsumexp(log_marg))
    g = categorical_normalize(CategoricalDist(log_marg)).weights
    g = np.maximum(g, RESP_FLOOR)
    g = g / g.sum()

    # conditional update of block j given that x came from component j
    gain = v @ np.linalg.inv(s)
    m_post = m + (gain @ resid[..., None])[..., 0]
    v_post = v - gain @ v
    delta = m_post - m
    gw = g[:, None]
    mean = m + gw * delta
    cov = (g[:, None, None] * v_post + (1.0 - g)[:, None, None] * v
           + (g * (1.0 - g))[:, None, None] * delta[:, :, None] * delta[:, None, :])
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    resp = CategoricalDist(np.log(g))
    return TiltedResult(GaussianMoment(mean, cov), log_z), resp


class ProbitLikelihood:
    """Probit sites over a design matrix, dispatched by datapoint index.

    ``alpha == 1`` uses the closed form; any other power goes through
    Gauss-Hermite quadrature.
    """

    latent = False

    def __init__(self, inputs, labels, alpha: float = 1.0, order: int = GH_ORDER):
        self.inputs = np.asarray(inputs, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        if not alpha > 0:
            raise ConfigInvalid("alpha must be positive")
        self.alpha = float(alpha)
        self.order = order
        self.blocks = ()

    @property
    def n_sites(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def site(self, n) -> ProbitSite:
        return ProbitSite(self.inputs[n], int(self.labels[n]))

    def tilted(self, cavity: GaussianMoment, n: int) -> TiltedResult:
        if self.alpha == 1.0:
            return probit_tilted_moments(cavity, self.site(n))
        return tilted_moments_quadrature(cavity, self.site(n), self.alpha, self.order)


class MixtureLikelihood:
    """Mixture-of-Gaussians sites with the cluster label summed out."""

    latent = True
    alpha = 1.0

    def __init__(self, inputs, model: MoGModel):
        self.inputs = np.asarray(inputs, dtype=float)
        self.model = model
        self.blocks = (model.J,)

    @property
    def n_sites(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def tilted_latent(self, cavity: GaussianMoment, n: int):
        return mog_tilted_update(cavity, self.inputs[n], self.model)

    def tilted(self, cavity: GaussianMoment, n: int) -> TiltedResult:
        return self.tilted_latent(cavity, n)[0]
