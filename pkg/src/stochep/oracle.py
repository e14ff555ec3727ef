"""Reference posteriors and evaluation metrics.

Two independent routes to posterior moments: a random-walk Metropolis
sampler for anything up to a few dozen dimensions, and brute-force grid
integration for one- and two-dimensional problems.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChainDiverged,
    ConfigInvalid,
    DegenerateInput,
    DimensionMismatch,
    EmptyTestSet,
    GridTooCoarse,
    NotNormalizable,
)
from .expfam import GaussianMoment, kl_gaussian
from .likelihoods import MoGModel, log_ndtr
from .rng import CounterRNG

log = logging.getLogger(__name__)


class ProbitPosterior:
    """Unnormalized log posterior of probit regression with a Gaussian prior.

    Accepts a single parameter vector or a stack of them (last axis D).
    """

    def __init__(self, inputs, labels, prior: GaussianMoment):
        self.inputs = np.asarray(inputs, dtype=float).reshape(-1, prior.dim)
        self.labels = np.asarray(labels, dtype=float)
        self.prior = prior
        self._prec = np.linalg.inv(prior.cov)

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        d = theta - self.prior.mean
        lp = -0.5 * np.einsum("...i,ij,...j->...", d, self._prec, d)
        if len(self.inputs):
            z = (theta @ self.inputs.T) * self.labels
            lp = lp + np.sum(log_ndtr(z), axis=-1)
        return lp


class MixturePosterior:
    """Log posterior over stacked cluster means, labels summed out.

    The parameter vector is the flattened ``(J, D)`` array of means.
    """

    def __init__(self, inputs, model: MoGModel):
        self.inputs = np.asarray(inputs, dtype=float)
        self.model = model
        self._prec = np.linalg.inv(model.mean_prior.cov)

    def __call__(self, mu):
        mu = np.asarray(mu, dtype=float)
        J, D, s2 = self.model.J, self.model.dim, self.model.sigma**2
        means = mu.reshape(mu.shape[:-1] + (J, D))
        d = means - self.model.mean_prior.mean
        lp = -0.5 * np.einsum("...ji,ik,...jk->...", d, self._prec, d)
        if len(self.inputs):
            # (..., N, J) squared distances
            diff = self.inputs[..., :, None, :] - means[..., None, :, :]
            sq = np.sum(diff * diff, axis=-1)
            comp = np.log(self.model.mix) - 0.5 * sq / s2 - 0.5 * D * np.log(2 * np.pi * s2)
            top = np.max(comp, axis=-1, keepdims=True)
            ll = top[..., 0] + np.log(np.sum(np.exp(comp - top), axis=-1))
            lp = lp + np.sum(ll, axis=-1)
        return lp


@dataclass(frozen=True)
class McmcConfig:
    steps: int = 20000
    burn_in: int = 5000
    proposal_scale: float = 0.1
    seed: int = 0
    adapt: bool = True
    chains: int = 4
    init_jitter: float = 0.01

    def __post_init__(self):
        if not 0 <= self.burn_in < self.steps:
            raise ConfigInvalid("burn_in must be smaller than steps")
        if not self.proposal_scale > 0:
            raise ConfigInvalid("proposal_scale must be positive")
        if self.chains < 1:
            raise ConfigInvalid("need at least one chain")


@dataclass
class McmcResult:
    samples: np.ndarray
    acceptance: float
    rhat: float
    chain_samples: np.ndarray = field(repr=False, default=None)


def metropolis_sample(log_posterior, init, cfg: McmcConfig) -> McmcResult:
    """Random-walk Metropolis with independent chains run in lockstep.

    ``log_posterior`` must accept a ``(chains, D)`` stack.  During burn-in
    each chain tunes its step scale towards 25% acceptance and, halfway
    through, switches to a proposal shaped by its own burn-in covariance.
    Post-burn-in draws of all chains are pooled in chain order.
    """
    init = np.atleast_1d(np.asarray(init, dtype=float))
    D = init.size
    C = cfg.chains
    rngs = [CounterRNG(cfg.seed, 7, c) for c in range(C)]
    jitter = np.stack([r.child(0).normal(D) for r in rngs])
    x = init + cfg.init_jitter * jitter
    lp = np.asarray(log_posterior(x), dtype=float)
    if not np.all(np.isfinite(lp)):
        raise ChainDiverged("log posterior is not finite at the initial point")

    n_keep = cfg.steps - cfg.burn_in
    kept = np.empty((C, n_keep, D))
    noise = np.stack([r.child(1).normal((cfg.steps, D)) for r in rngs], axis=1)
    logu = np.log(np.stack([r.child(2).uniform(cfg.steps) for r in rngs], axis=1))
    scale = np.full(C, cfg.proposal_scale)
    shape = np.broadcast_to(np.eye(D), (C, D, D)).copy()
    window = 50
    acc_window = np.zeros(C)
    accepted = np.zeros(C)
    neg_inf = 0
    half = cfg.burn_in // 2
    history = np.empty((C, max(half, 1), D))

    for i in range(cfg.steps):
        step = np.einsum("cij,cj->ci", shape, noise[i]) * scale[:, None]
        prop = x + step
        lp_prop = np.asarray(log_posterior(prop), dtype=float)
        neg_inf += int(np.sum(lp_prop == -np.inf))
        acc = logu[i] < lp_prop - lp
        x = np.where(acc[:, None], prop, x)
        lp = np.where(acc, lp_prop, lp)
        if i < cfg.burn_in:
            acc_window += acc
            if i < half:
                history[:, i] = x
            if cfg.adapt and (i + 1) % window == 0:
                rate = acc_window / window
                scale *= np.exp(2.0 * (rate - 0.25))
                acc_window[:] = 0
            if cfg.adapt and i + 1 == half and half >= 10 * D:
                for c in range(C):
                    emp = np.cov(history[c, half // 2:], rowvar=False).reshape(D, D)
                    try:
                        shape[c] = np.linalg.cholesky(emp + 1e-12 * np.eye(D))
                        scale[c] = 2.38 / np.sqrt(D)
                    except np.linalg.LinAlgError:
                        pass
        else:
            accepted += acc
            kept[:, i - cfg.burn_in] = x

    if neg_inf > 0.99 * cfg.steps * C:
        raise ChainDiverged("log posterior was -inf at more than 99% of proposals")
    rate = float(accepted.sum() / (C * n_keep)) if n_keep else float("nan")
    rhat = split_rhat(kept)
    if rhat > 1.1:
        log.warning("split R-hat %.3f exceeds 1.1; reference may be unreliable", rhat)
    return McmcResult(kept.reshape(-1, D), rate, rhat, kept)


def split_rhat(chains: np.ndarray) -> float:
    """Largest split potential-scale-reduction statistic over parameters."""
    C, n, D = chains.shape
    h = n // 2
    if h < 2:
        return float("nan")
    halves = np.concatenate([chains[:, :h], chains[:, h:2 * h]], axis=0)
    means = halves.mean(axis=1)
    within = halves.var(axis=1, ddof=1).mean(axis=0)
    between = h * means.var(axis=0, ddof=1)
    var_hat = (h - 1) / h * within + between / h
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_hat / within)
    return float(np.nanmax(r))


def fit_gaussian(samples) -> GaussianMoment:
    """Sample mean and unbiased sample covariance."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, d = samples.shape
    if n < d + 2:
        raise DegenerateInput(f"need at least {d + 2} samples, got {n}")
    mean = samples.mean(axis=0)
    cov = np.cov(samples, rowvar=False, ddof=1).reshape(d, d)
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotNormalizable("sample covariance is singular") from exc
    return GaussianMoment(mean, cov)


def calibration_kl(reference: GaussianMoment, q: GaussianMoment) -> float:
    """KL[reference || q], reference first."""
    return kl_gaussian(reference, q)


def fnorm_errors(ref: GaussianMoment, q: GaussianMoment) -> tuple[float, float]:
    """Frobenius errors of mean and covariance, averaged over blocks."""
    if ref.shape != q.shape:
        raise DimensionMismatch(f"shapes differ: {ref.shape} vs {q.shape}")
    dm = (ref.mean - q.mean).reshape(-1, ref.dim)
    dc = (ref.cov - q.cov).reshape(-1, ref.dim, ref.dim)
    mean_err = float(np.mean(np.sqrt(np.sum(dm * dm, axis=-1))))
    cov_err = float(np.mean(np.sqrt(np.sum(dc * dc, axis=(-2, -1)))))
    return mean_err, cov_err


def match_blocks(ref_means, q_means) -> np.ndarray:
    """Greedy matching of reference blocks to approximation blocks.

    Returns ``perm`` with ``ref_means[perm[j]]`` paired to ``q_means[j]``.
    """
    ref_means = np.asarray(ref_means)
    q_means = np.asarray(q_means)
    J = len(q_means)
    dist = np.sum((q_means[:, None, :] - ref_means[None, :, :]) ** 2, axis=-1)
    perm = np.full(J, -1)
    used_q, used_r = set(), set()
    for flat in np.argsort(dist, axis=None, kind="stable"):
        j, r = divmod(int(flat), J)
        if j in used_q or r in used_r:
            continue
        perm[j] = r
        used_q.add(j)
        used_r.add(r)
    return perm


@dataclass(frozen=True)
class Reference:
    """Reference posterior moments over the flattened parameter vector.

    ``blocks`` is the leading block shape of the approximations it is
    compared against (``()`` for probit, ``(J,)`` for mixtures).
    """

    moments: GaussianMoment
    blocks: tuple = ()

    def aligned(self, q: GaussianMoment) -> GaussianMoment:
        """Reference in ``q``'s block layout and (for mixtures) label order."""
        if not self.blocks:
            if self.moments.shape != q.shape:
                raise DimensionMismatch(f"reference {self.moments.shape} vs q {q.shape}")
            return self.moments
        J, D = q.shape
        if self.moments.dim != J * D:
            raise DimensionMismatch(f"reference dim {self.moments.dim} vs q {q.shape}")
        perm = match_blocks(self.moments.mean.reshape(J, D), q.mean)
        idx = np.concatenate([np.arange(p * D, (p + 1) * D) for p in perm])
        return GaussianMoment(self.moments.mean[idx], self.moments.cov[np.ix_(idx, idx)])

    def compare(self, q: GaussianMoment) -> dict:
        ref = self.aligned(q)
        if self.blocks:
            J, D = q.shape
            diag = np.stack([ref.cov[j * D:(j + 1) * D, j * D:(j + 1) * D] for j in range(J)])
            block_ref = GaussianMoment(ref.mean.reshape(J, D), diag)
            kl = calibration_kl(ref, q.block_diag())
        else:
            block_ref = ref
            kl = calibration_kl(ref, q)
        mean_err, cov_err = fnorm_errors(block_ref, q)
        return {"kl": kl, "mean_fnorm": mean_err, "cov_fnorm": cov_err}

    def to_dict(self) -> dict:
        return {"mean": self.moments.mean.tolist(), "cov": self.moments.cov.tolist(),
                "blocks": list(self.blocks)}

    @classmethod
    def from_dict(cls, d) -> "Reference":
        return cls(GaussianMoment(np.asarray(d["mean"]), np.asarray(d["cov"])),
                   tuple(d.get("blocks", ())))


def mcmc_reference(log_posterior, init, cfg: McmcConfig, blocks: tuple = ()) -> Reference:
    result = metropolis_sample(log_posterior, init, cfg)
    log.info("reference chain acceptance %.3f, split R-hat %.3f", result.acceptance, result.rhat)
    return Reference(fit_gaussian(result.samples), blocks)


@dataclass(frozen=True)
class GridSpec:
    bounds: tuple
    counts: tuple

    def __post_init__(self):
        if len(self.bounds) != len(self.counts):
            raise ConfigInvalid("one (lo, hi) pair and one count per dimension")
        if not 1 <= len(self.counts) <= 2:
            raise ConfigInvalid("grid integration supports one or two dimensions")
        if int(np.prod(self.counts)) > 10**7:
            raise ConfigInvalid("grid exceeds 1e7 points")

    @classmethod
    def around(cls, mean, sd, width=10.0, count=2001) -> "GridSpec":
        mean = np.atleast_1d(mean)
        sd = np.atleast_1d(sd)
        return cls(tuple((float(m - width * s), float(m + width * s)) for m, s in zip(mean, sd)),
                   (count,) * len(mean))


def grid_posterior_moments(log_posterior, grid: GridSpec, chunk: int = 200_000) -> GaussianMoment:
    """Posterior mean and covariance by summation over a uniform grid.

    Raises
    ------
    GridTooCoarse
        If more than 1e-6 of the mass sits on the grid boundary, i.e. the
        bounds cut off the posterior.
    """
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(grid.bounds, grid.counts)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    logp = np.concatenate([np.asarray(log_posterior(mesh[i:i + chunk]), dtype=float)
                           for i in range(0, len(mesh), chunk)])
    w = np.exp(logp - np.max(logp))
    total = w.sum()
    on_edge = np.zeros(len(mesh), dtype=bool)
    for k, a in enumerate(axes):
        on_edge |= (mesh[:, k] == a[0]) | (mesh[:, k] == a[-1])
    if w[on_edge].sum() > 1e-6 * total:
        raise GridTooCoarse("posterior mass reaches the grid boundary; widen the bounds")
    w = w / total
    mean = w @ mesh
    d = mesh - mean
    cov = (d * w[:, None]).T @ d
    return GaussianMoment(mean, 0.5 * (cov + cov.T))


def predictive_prob(q: GaussianMoment, inputs) -> np.ndarray:
    """P(y = +1 | x) under q: Phi(x'mu / sqrt(x'Sigma x + 1))."""
    from scipy.special import ndtr

    inputs = np.asarray(inputs, dtype=float)
    s2 = np.einsum("ni,ij,nj->n", inputs, q.cov, inputs) + 1.0
    return ndtr(inputs @ q.mean / np.sqrt(s2))


def test_metrics(q: GaussianMoment, inputs, labels) -> tuple[float, float]:
    """Error rate at threshold 0.5 and mean log predictive probability."""
    inputs = np.asarray(inputs, dtype=float)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyTestSet("test set is empty")
    s2 = np.einsum("ni,ij,nj->n", inputs, q.cov, inputs) + 1.0
    z = inputs @ q.mean / np.sqrt(s2)
    pred = np.where(z > 0, 1, -1)
    err = float(np.mean(pred != labels))
    ll = float(np.mean(log_ndtr(labels * z)))
    return err, ll


test_metrics.__test__ = False
