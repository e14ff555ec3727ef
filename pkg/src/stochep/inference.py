"""The EP family as update steps over an approximation state.

Every algorithm keeps its factors in natural parameters, so cavities,
inclusions and damping are sums and scalings of arrays:

* EP keeps one site factor per datapoint and ``q = prior * prod(sites)``.
* ADF keeps only ``q`` and uses it as the cavity.
* SEP keeps only ``q``; the tied factor is implicit,
  ``f = ((q / prior) ** (1 / N))``, and one copy of it is removed to form
  the cavity.
* Parallel SEP combines ``M`` intermediate factors computed against one
  shared cavity.
* Distributed SEP keeps one tied factor per data partition.
* Latent SEP is SEP on a mixture model whose per-datapoint cluster
  responsibilities are recomputed at every visit and never stored.

Update functions are pure: they return a new :class:`ApproxState` or raise
:class:`~stochep.errors.SkippedUpdate`, in which case the caller's state is
untouched.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigInvalid, NotNormalizable, SkippedUpdate, DegenerateInput
from .expfam import (
    CategoricalDist,
    GaussianMoment,
    GaussianNatural,
    factor_divide,
    factor_multiply,
    factor_power,
    to_moments,
    to_natural,
)
from .likelihoods import MixtureLikelihood, MoGModel, ProbitLikelihood
from .rng import CounterRNG

log = logging.getLogger(__name__)

ALGORITHMS = ("ep", "adf", "sep", "psep", "dsep", "lsep")
SWEEPS = ("sequential", "shuffled")
SCHEDULES = ("fixed", "one_over_n", "robbins_monro")


@dataclass(frozen=True)
class DampingSchedule:
    kind: str = "fixed"
    epsilon0: float = 1.0
    tau: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigInvalid(f"unknown damping schedule {self.kind!r}")
        if self.kind != "one_over_n" and not 0.0 < self.epsilon0 <= 1.0:
            raise ConfigInvalid("epsilon0 must lie in (0, 1]")
        if self.kind == "robbins_monro":
            if not 0.5 < self.kappa <= 1.0:
                raise ConfigInvalid("Robbins-Monro needs kappa in (0.5, 1]")
            if not self.tau > 0:
                raise ConfigInvalid("tau must be positive")


def epsilon_at(schedule: DampingSchedule, t: int, n: int | None = None) -> float:
    """Step size for update number ``t`` (counted from 0).

    ``n`` is the number of datapoints the damped factor stands for; it is only
    used by the ``one_over_n`` schedule.
    """
    if schedule.kind == "fixed":
        return schedule.epsilon0
    if schedule.kind == "one_over_n":
        if not n:
            raise ConfigInvalid("one_over_n damping needs the factor's datapoint count")
        return 1.0 / n
    return schedule.epsilon0 * (schedule.tau / (schedule.tau + t)) ** schedule.kappa


def default_damping(algorithm: str) -> DampingSchedule:
    if algorithm in ("ep", "adf"):
        return DampingSchedule("fixed", 1.0)
    return DampingSchedule("one_over_n")


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "sep"
    minibatch: int = 1
    partitions: int = 1
    alpha: float = 1.0
    passes: int = 20
    sweep: str = "shuffled"
    seed: int = 0
    tol: float = 1e-4
    damping: DampingSchedule | None = None
    stride: int | None = None
    gh_order: int = 64

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigInvalid(f"unknown algorithm {self.algorithm!r}")
        if self.sweep not in SWEEPS:
            raise ConfigInvalid(f"unknown sweep order {self.sweep!r}")
        if not self.alpha > 0:
            raise ConfigInvalid("alpha must be positive")
        if self.passes < 0:
            raise ConfigInvalid("passes must be >= 0")
        if self.minibatch < 1 or self.partitions < 1:
            raise ConfigInvalid("minibatch and partitions must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ConfigInvalid("stride must be >= 1")

    @property
    def resolved_damping(self) -> DampingSchedule:
        return self.damping if self.damping is not None else default_damping(self.algorithm)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["damping"] = asdict(self.resolved_damping)
        return out


@dataclass(frozen=True)
class ApproxState:
    """Everything an algorithm keeps in memory between updates.

    ``sites`` is only present for EP; ``partition_factors`` and
    ``partition_counts`` only for distributed SEP.  SEP and latent SEP hold
    nothing beyond ``prior`` and ``q``.
    """

    mode: str
    prior: GaussianNatural
    q: GaussianNatural
    n_data: int
    sites: tuple | None = None
    partition_factors: tuple | None = None
    partition_counts: tuple | None = None

    @property
    def tied_factor(self) -> GaussianNatural:
        """The implicit SEP factor ``(q / prior) ** (1 / N)``."""
        return factor_power(factor_divide(self.q, self.prior), 1.0 / self.n_data)

    def param_count(self) -> int:
        """Number of floats stored across all factors."""
        total = self.prior.n_params + self.q.n_params
        if self.sites is not None:
            total += sum(s.n_params for s in self.sites)
        if self.partition_factors is not None:
            total += sum(f.n_params for f in self.partition_factors)
        return total

    def reconstructed_q(self) -> GaussianNatural:
        """``q`` rebuilt from the stored factors (EP and DSEP only)."""
        q = self.prior
        if self.sites is not None:
            for s in self.sites:
                q = factor_multiply(q, s)
        elif self.partition_factors is not None:
            for f, c in zip(self.partition_factors, self.partition_counts):
                q = factor_multiply(q, factor_power(f, c))
        return q


_MODES = {"ep": "ep", "adf": "adf", "sep": "sep", "psep": "sep", "lsep": "sep", "dsep": "dsep"}


def init_state(algorithm: str, prior: GaussianNatural, n_data: int,
               partition_of=None, offset: GaussianNatural | None = None) -> ApproxState:
    """Initial state with ``q = prior`` and unit factors.

    ``offset`` is an optional factor folded into ``q`` at start (used to break
    label symmetry in mixtures).  It is charged to the stored factors so the
    state invariants hold from the first step: spread evenly over EP sites
    and over partition factors, and implicit for SEP.
    """
    mode = _MODES[algorithm]
    unit = GaussianNatural(np.zeros_like(prior.r), np.zeros_like(prior.lam))
    share = unit if offset is None else factor_power(offset, 1.0 / n_data)
    q = prior if offset is None else factor_multiply(prior, offset)
    if mode == "ep":
        return ApproxState(mode, prior, q, n_data, sites=(share,) * n_data)
    if mode == "dsep":
        counts = np.bincount(np.asarray(partition_of), minlength=int(np.max(partition_of)) + 1)
        return ApproxState(mode, prior, q, n_data,
                           partition_factors=(share,) * len(counts),
                           partition_counts=tuple(int(c) for c in counts))
    return ApproxState(mode, prior, q, n_data)


def _moments(g: GaussianNatural) -> GaussianMoment:
    try:
        return to_moments(g)
    except NotNormalizable as exc:
        raise SkippedUpdate(f"non-normalizable distribution: {exc}") from exc


def _project(likelihood, cavity: GaussianNatural, n: int, alpha: float):
    """Intermediate factor ``(proj[tilted] / cavity) ** (1 / alpha)``."""
    cav_m = _moments(cavity)
    try:
        if likelihood.latent:
            tilted, resp = likelihood.tilted_latent(cav_m, n)
        else:
            tilted, resp = likelihood.tilted(cav_m, n), None
        proj = to_natural(tilted.moments)
    except (NotNormalizable, DegenerateInput, np.linalg.LinAlgError) as exc:
        raise SkippedUpdate(f"projection failed at site {n}: {exc}") from exc
    if not (np.all(np.isfinite(proj.r)) and np.all(np.isfinite(proj.lam))):
        raise SkippedUpdate(f"non-finite projection at site {n}")
    return factor_power(factor_divide(proj, cavity), 1.0 / alpha), resp


def _checked(q: GaussianNatural) -> GaussianNatural:
    if not q.is_normalizable():
        raise SkippedUpdate("update would leave q non-normalizable")
    return q


def ep_update(state: ApproxState, n: int, likelihood, eps: float = 1.0) -> ApproxState:
    """Refine site ``n``: remove it, project the tilted, damp the new site in."""
    if state.mode != "ep":
        raise ConfigInvalid("ep_update needs an EP state")
    alpha = likelihood.alpha
    old = state.sites[n]
    cavity = factor_divide(state.q, factor_power(old, alpha))
    new, _ = _project(likelihood, cavity, n, alpha)
    step = factor_power(factor_divide(new, old), eps)
    q = _checked(factor_multiply(state.q, step))
    sites = state.sites[:n] + (factor_multiply(old, step),) + state.sites[n + 1:]
    return replace(state, q=q, sites=sites)


def adf_update(state: ApproxState, n: int, likelihood, eps: float = 1.0) -> ApproxState:
    """Project the tilted formed with ``q`` itself as the cavity."""
    if state.mode != "adf":
        raise ConfigInvalid("adf_update needs an ADF state")
    new, _ = _project(likelihood, state.q, n, likelihood.alpha)
    q = _checked(factor_multiply(state.q, factor_power(new, eps)))
    return replace(state, q=q)


def _sep_step(state, n, likelihood, eps):
    alpha = likelihood.alpha
    f = state.tied_factor
    cavity = factor_divide(state.q, factor_power(f, alpha))
    new, resp = _project(likelihood, cavity, n, alpha)
    step = factor_power(factor_divide(new, f), state.n_data * eps)
    q = _checked(factor_multiply(state.q, step))
    return replace(state, q=q), resp


def sep_update(state: ApproxState, n: int, likelihood, eps: float | None = None) -> ApproxState:
    """One SEP step: ``f <- f^(1-eps) f_n^eps`` with ``q = prior f^N``.

    ``eps`` defaults to ``1/N``, for which the new ``q`` is exactly the
    projected tilted distribution.
    """
    if state.mode != "sep":
        raise ConfigInvalid("sep_update needs a SEP state")
    eps = 1.0 / state.n_data if eps is None else eps
    return _sep_step(state, n, likelihood, eps)[0]


def parallel_sep_update(state: ApproxState, batch, likelihood,
                        eps: float | None = None) -> ApproxState:
    """Minibatch SEP: every site in ``batch`` sees the same cavity.

    The new tied factor is ``f^(1 - S eps) prod_m f_m^eps`` over the ``S``
    sites whose projections succeeded; with ``eps = 1/N`` this is the
    geometric combination rule.  Intermediate factors are summed in
    ascending site order so the result does not depend on evaluation order.
    Duplicated indices contribute once per occurrence.

    The same update can be read as the ``q`` minimising
    ``sum_m KL[q || q_m] + (N - M) KL[q || q_old]`` over Gaussians, where
    ``q_m`` are the per-site projections; only the explicit rule is
    implemented.
    """
    if state.mode != "sep":
        raise ConfigInvalid("parallel_sep_update needs a SEP state")
    eps = 1.0 / state.n_data if eps is None else eps
    alpha = likelihood.alpha
    f = state.tied_factor
    cavity = factor_divide(state.q, factor_power(f, alpha))
    total = None
    failed = 0
    for n in sorted(int(i) for i in batch):
        try:
            new, _ = _project(likelihood, cavity, n, alpha)
        except SkippedUpdate as exc:
            failed += 1
            log.debug("minibatch site skipped: %s", exc)
            continue
        diff = factor_divide(new, f)
        total = diff if total is None else factor_multiply(total, diff)
    if total is None:
        raise SkippedUpdate("every site in the minibatch failed")
    if failed:
        log.debug("minibatch combined %d of %d sites", len(batch) - failed, len(batch))
    q = _checked(factor_multiply(state.q, factor_power(total, state.n_data * eps)))
    return replace(state, q=q)


def dsep_update(state: ApproxState, k: int, n: int, likelihood,
                eps: float | None = None) -> ApproxState:
    """SEP inside partition ``k``: one copy of ``f_k`` forms the cavity.

    ``eps`` defaults to ``1 / N_k``.
    """
    if state.mode != "dsep":
        raise ConfigInvalid("dsep_update needs a DSEP state")
    alpha = likelihood.alpha
    count = state.partition_counts[k]
    eps = 1.0 / count if eps is None else eps
    old = state.partition_factors[k]
    cavity = factor_divide(state.q, factor_power(old, alpha))
    new, _ = _project(likelihood, cavity, n, alpha)
    diff = factor_divide(new, old)
    q = _checked(factor_multiply(state.q, factor_power(diff, count * eps)))
    fk = factor_multiply(old, factor_power(diff, eps))
    factors = state.partition_factors[:k] + (fk,) + state.partition_factors[k + 1:]
    return replace(state, q=q, partition_factors=factors)


def latent_sep_update(state: ApproxState, n: int, likelihood: MixtureLikelihood,
                      eps: float | None = None) -> tuple[ApproxState, CategoricalDist]:
    """SEP step on a latent-variable model.

    Returns the new state and the responsibilities of datapoint ``n``; the
    responsibilities are for reporting and are not kept in the state.
    """
    if state.mode != "sep" or not getattr(likelihood, "latent", False):
        raise ConfigInvalid("latent_sep_update needs a SEP state and a latent model")
    eps = 1.0 / state.n_data if eps is None else eps
    return _sep_step(state, n, likelihood, eps)


TRACE_COLUMNS = ("iter", "kl", "mean_fnorm", "cov_fnorm", "test_ll", "test_err",
                 "factor_delta", "trace_cov", "wall_ms")


@dataclass
class TraceRow:
    iter: int
    kl: float = float("nan")
    mean_fnorm: float = float("nan")
    cov_fnorm: float = float("nan")
    test_ll: float = float("nan")
    test_err: float = float("nan")
    factor_delta: float = float("nan")
    trace_cov: float = float("nan")
    wall_ms: float = float("nan")


@dataclass
class RunTrace:
    config: RunConfig
    rows: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    skipped: int = 0
    updates: int = 0
    passes_run: int = 0
    converged: bool = False
    state: ApproxState | None = None

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def final(self) -> TraceRow:
        return self.rows[-1]


def _snapshot(state: ApproxState) -> tuple:
    if state.mode == "ep":
        return state.sites
    if state.mode == "dsep":
        return state.partition_factors
    return (state.tied_factor,)


def _delta(a: tuple, b: tuple) -> float:
    # identical objects are unchanged sites; skip the arithmetic
    return max((x.max_abs_diff(y) for x, y in zip(a, b) if x is not y), default=0.0)


def build_likelihood(config: RunConfig, data, model: MoGModel | None = None):
    if data.labels is not None:
        if config.algorithm == "lsep":
            raise ConfigInvalid("lsep needs an unlabeled mixture dataset")
        return ProbitLikelihood(data.inputs, data.labels, config.alpha, config.gh_order)
    if model is None:
        raise ConfigInvalid("unlabeled data needs a mixture model")
    if config.alpha != 1.0:
        raise ConfigInvalid("mixture sites support alpha = 1 only")
    return MixtureLikelihood(data.inputs, model)


def default_prior(likelihood, gamma: float = 1.0) -> GaussianNatural:
    if isinstance(likelihood, MixtureLikelihood):
        mp = likelihood.model.mean_prior
        J = likelihood.model.J
        m = GaussianMoment(np.broadcast_to(mp.mean, (J, mp.dim)),
                           np.broadcast_to(mp.cov, (J, mp.dim, mp.dim)))
        return to_natural(m)
    d = likelihood.dim
    return GaussianNatural(np.zeros(d), np.eye(d) / gamma)


def mixture_offset(inputs, prior: GaussianNatural, seed: int) -> GaussianNatural:
    """Mean-only factor moving each block of ``q`` onto a distinct datapoint.

    Centres are picked by farthest-point traversal from a seeded start; the
    factor has zero precision, so it shifts the initial means only.
    """
    inputs = np.asarray(inputs, dtype=float)
    J = prior.r.shape[0]
    start = int(CounterRNG(seed, 11).uniform() * len(inputs))
    chosen = [start]
    dist = np.sum((inputs - inputs[start]) ** 2, axis=1)
    for _ in range(1, J):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((inputs - inputs[nxt]) ** 2, axis=1))
    centres = inputs[chosen]
    prior_m = to_moments(prior)
    shift = (prior.lam @ (centres - prior_m.mean)[..., None])[..., 0]
    return GaussianNatural(shift, np.zeros_like(prior.lam))


def sweep_order(config: RunConfig, n: int, pass_index: int) -> np.ndarray:
    if config.sweep == "sequential":
        return np.arange(n)
    return CounterRNG(config.seed, 1, pass_index).permutation(n)


def run(config: RunConfig, data, oracle=None, *, model: MoGModel | None = None,
        prior: GaussianNatural | None = None, gamma: float = 1.0, test=None,
        partition_of=None, clock=time.perf_counter, on_row=None) -> RunTrace:
    """Run one configured algorithm over ``data`` and record a trace.

    Parameters
    ----------
    config : RunConfig
    data : Dataset
        Training data.  Labeled data gets probit sites; unlabeled data needs
        ``model``.
    oracle : optional
        Anything with a ``compare(q_moments) -> dict`` method, typically
        :class:`stochep.oracle.Reference`; fills the ``kl`` and F-norm
        columns.
    test : Dataset, optional
        Labeled held-out set for the predictive metrics.
    partition_of : array, optional
        Partition id per datapoint for distributed SEP.  Defaults to
        ``data.partition_ids(config.partitions)``.
    on_row : callable, optional
        Called as ``on_row(row, q_moments)`` after every recorded row.

    Passes stop early once the largest natural-parameter change of any
    approximating factor over a whole pass drops below ``config.tol``.
    """
    from .oracle import test_metrics

    likelihood = build_likelihood(config, data, model)
    N = likelihood.n_sites
    if config.minibatch > N or config.partitions > N:
        raise ConfigInvalid(f"minibatch and partitions must not exceed N={N}")
    if config.algorithm == "lsep" and not likelihood.latent:
        raise ConfigInvalid("lsep needs a latent model")
    prior = default_prior(likelihood, gamma) if prior is None else prior
    if config.algorithm == "dsep" and partition_of is None:
        partition_of = data.partition_ids(config.partitions)
    offset = mixture_offset(data.inputs, prior, config.seed) if likelihood.latent else None
    state = init_state(config.algorithm, prior, N, partition_of, offset)
    damping = config.resolved_damping
    stride = config.stride or N
    trace = RunTrace(config)
    start = clock()
    last_snap = _snapshot(state)

    def record(visits):
        nonlocal last_snap
        snap = _snapshot(state)
        row = TraceRow(visits, factor_delta=_delta(snap, last_snap) if trace.rows else float("nan"))
        last_snap = snap
        try:
            qm = to_moments(state.q)
        except NotNormalizable:
            qm = None
        if qm is not None:
            row.trace_cov = float(np.trace(qm.cov, axis1=-2, axis2=-1).sum())
            if oracle is not None:
                for key, value in oracle.compare(qm).items():
                    setattr(row, key, value)
            if test is not None:
                row.test_err, row.test_ll = test_metrics(qm, test.inputs, test.labels)
        row.wall_ms = 1000.0 * (clock() - start)
        trace.rows.append(row)
        trace.snapshots.append(qm)
        if on_row is not None:
            on_row(row, qm)

    record(0)
    visits = 0
    t = 0
    for p in range(config.passes):
        pass_snap = _snapshot(state)
        order = sweep_order(config, N, p)
        if config.algorithm == "psep":
            batches = [order[i:i + config.minibatch] for i in range(0, N, config.minibatch)]
        else:
            batches = [(n,) for n in order]
        for batch in batches:
            try:
                state = _dispatch(config.algorithm, state, batch, likelihood, damping, t,
                                  partition_of)
            except SkippedUpdate as exc:
                trace.skipped += 1
                log.debug("skipped update: %s", exc)
            t += 1
            before = visits
            visits += len(batch)
            if visits // stride > before // stride and visits < N * (p + 1):
                record(visits)
        trace.passes_run = p + 1
        pass_delta = _delta(_snapshot(state), pass_snap)
        if trace.rows[-1].iter != visits:
            record(visits)
        if pass_delta < config.tol:
            trace.converged = True
            break
    trace.updates = t
    trace.state = state
    return trace


def _dispatch(algorithm, state, batch, likelihood, damping, t, partition_of):
    if algorithm == "dsep":
        n = int(batch[0])
        k = int(partition_of[n])
        eps = epsilon_at(damping, t, state.partition_counts[k])
        return dsep_update(state, k, n, likelihood, eps)
    eps = epsilon_at(damping, t, state.n_data)
    if algorithm == "psep":
        return parallel_sep_update(state, batch, likelihood, eps)
    n = int(batch[0])
    if algorithm == "ep":
        return ep_update(state, n, likelihood, eps)
    if algorithm == "adf":
        return adf_update(state, n, likelihood, eps)
    if algorithm == "lsep":
        return latent_sep_update(state, n, likelihood, eps)[0]
    return sep_update(state, n, likelihood, eps)
