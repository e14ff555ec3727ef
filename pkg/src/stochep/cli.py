"""Command-line harness: ``stochep gen``, ``stochep run`` and ``stochep eval``.

Exit codes: 0 success, 2 configuration error, 3 data or reference error,
4 numerical failure (for example every update skipped).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    MoGGenConfig,
    ProbitGenConfig,
    gen_mog,
    gen_probit,
    load_csv,
    split,
    standardize_split,
)
from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    GridTooCoarse,
    MissingReference,
    SchemaError,
    StochEPError,
)
from .expfam import GaussianMoment, factor_multiply, to_moments
from .inference import (
    ALGORITHMS,
    SCHEDULES,
    SWEEPS,
    TRACE_COLUMNS,
    DampingSchedule,
    RunConfig,
    build_likelihood,
    default_prior,
    mixture_offset,
    run,
)
from .likelihoods import MoGModel
from .oracle import (
    GridSpec,
    McmcConfig,
    MixturePosterior,
    ProbitPosterior,
    Reference,
    grid_posterior_moments,
    mcmc_reference,
)

log = logging.getLogger(__name__)

OUTPUT_ENV = "STOCHEP_OUTPUT_DIR"
EVAL_METRICS = ("kl", "mean_fnorm", "cov_fnorm", "test_ll", "test_err", "trace_cov")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _finite_or_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    return obj


def _dump_json(obj, path: Path):
    # strict JSON: non-finite metrics are written as null
    text = json.dumps(_finite_or_none(obj), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _out_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "stochep-out"))


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text!r}")
    return v


def _epsilon(text):
    if text == "auto":
        return text
    v = _positive_float(text)
    if v > 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text!r}")
    return v


# ---------------------------------------------------------------- gen

def truth_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".truth.json")


def write_dataset(data: Dataset, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = list(data.feature_names) + (["label"] if data.labels is not None else [])
        w.writerow(header)
        for i in range(data.n):
            row = [_fmt(v) for v in data.inputs[i]]
            if data.labels is not None:
                row.append(str(int(data.labels[i])))
            w.writerow(row)


def cmd_gen(args) -> int:
    if args.kind == "probit":
        cfg = ProbitGenConfig(N=args.n, D=args.d, input_dist=args.inputs, J=args.j,
                              gamma=args.gamma, seed=args.seed)
        data = gen_probit(cfg)
    else:
        cfg = MoGGenConfig(N=args.n, D=args.d, J=args.j, sigma=args.sigma,
                           center=args.center, seed=args.seed)
        data = gen_mog(cfg)
    out = Path(args.out) if args.out else _out_root() / f"{args.kind}.csv"
    write_dataset(data, out)
    sidecar = {
        "kind": args.kind,
        "seed": args.seed,
        "config": asdict(cfg),
        "truth": data.true_params,
        "partition_of": None if data.partition_of is None else data.partition_of.tolist(),
        "version": __version__,
    }
    _dump_json(sidecar, truth_path(out))
    print(out)
    return 0


# ---------------------------------------------------------------- run

@dataclass
class ExperimentSpec:
    """Everything that determines one ``run``; echoed in full in the summary."""

    data: str
    out: str
    run: RunConfig
    test_fraction: float = 0.0
    standardize: str = "auto"
    gamma: float = 1.0
    sigma: float | None = None
    j: int | None = None
    oracle: str = "none"
    reference: str | None = None
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    timing: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["run"] = self.run.to_dict()
        return d


def load_truth(csv_path) -> dict | None:
    p = truth_path(csv_path)
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def _header(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def prepare_data(spec: ExperimentSpec):
    """Load, split and standardize.  Returns ``(train, test, model, truth)``."""
    truth = load_truth(spec.data)
    kind = truth["kind"] if truth else ("probit" if "label" in _header(spec.data) else "mog")
    data = load_csv(spec.data, label_column="label" if kind == "probit" else None,
                    standardize=False)
    if truth and truth.get("partition_of") is not None:
        data = replace(data, partition_of=np.asarray(truth["partition_of"]))
    standardize = spec.standardize == "yes" or (spec.standardize == "auto" and truth is None)
    model = None
    if kind == "mog":
        cfg = (truth or {}).get("config", {})
        J = spec.j or cfg.get("J")
        sigma = spec.sigma or cfg.get("sigma")
        if J is None or sigma is None:
            raise ConfigInvalid("mixture data needs --j and --sigma (or a truth sidecar)")
        centre = float(cfg.get("center", 0.0))
        prior = GaussianMoment(np.full(data.dim, centre), spec.gamma * np.eye(data.dim))
        model = MoGModel(int(J), float(sigma), prior)
    test = None
    if spec.test_fraction > 0:
        if kind != "probit":
            raise ConfigInvalid("a test split needs labeled data")
        data, test = split(data, spec.test_fraction, spec.run.seed)
    if standardize:
        data, test = standardize_split(data, test)
    return data, test, model, truth


def build_reference(spec: ExperimentSpec, data: Dataset, model, prior) -> Reference | None:
    if spec.reference:
        return load_reference(spec.reference)
    if spec.oracle == "none":
        return None
    if model is None:
        log_post = ProbitPosterior(data.inputs, data.labels, to_moments(prior))
        blocks = ()
        init = np.zeros(data.dim)
    else:
        log_post = MixturePosterior(data.inputs, model)
        blocks = (model.J,)
        offset = mixture_offset(data.inputs, prior, spec.run.seed)
        init = to_moments(factor_multiply(prior, offset)).mean.reshape(-1)
    if spec.oracle == "mcmc":
        return mcmc_reference(log_post, init, spec.mcmc, blocks)
    # two-stage grid: a wide pass to locate the posterior, then a tight one
    pm = to_moments(prior).block_diag()
    if pm.dim > 2:
        raise ConfigInvalid(f"grid oracle supports at most 2 parameters, model has {pm.dim}")
    count = 4001 if pm.dim == 1 else 401
    coarse = grid_posterior_moments(
        log_post, GridSpec.around(pm.mean, np.sqrt(np.diag(pm.cov)), 12.0, count))
    sd = np.sqrt(np.diag(coarse.cov))
    fine = None
    for width in (12.0, 24.0):
        try:
            fine = grid_posterior_moments(log_post, GridSpec.around(coarse.mean, sd, width, count))
            break
        except GridTooCoarse:
            continue
    if fine is None:
        raise GridTooCoarse("posterior mass reaches the grid boundary at every width tried")
    return Reference(fine, blocks)


def load_reference(path) -> Reference:
    p = Path(path)
    if not p.exists():
        raise MissingReference(f"reference file {p} not found")
    try:
        return Reference.from_dict(json.loads(p.read_text(encoding="utf-8")))
    except (KeyError, ValueError, DimensionMismatch) as exc:
        raise MissingReference(f"reference file {p} is malformed: {exc}") from exc


def param_counts(state) -> dict:
    out = {"prior": state.prior.n_params, "q": state.q.n_params, "total": state.param_count()}
    if state.sites is not None:
        out["sites"] = len(state.sites)
        out["site_params"] = sum(s.n_params for s in state.sites)
    if state.partition_factors is not None:
        out["K"] = len(state.partition_factors)
        out["partition_factor_params"] = [f.n_params for f in state.partition_factors]
        out["N_k"] = list(state.partition_counts)
    return out


def _state_record(iteration, qm) -> dict:
    if qm is None:
        return {"iter": iteration, "mean": None, "cov": None}
    return {"iter": iteration, "mean": qm.mean.tolist(), "cov": qm.cov.tolist()}


def spec_from_args(args) -> ExperimentSpec:
    damping = None
    if args.damping is not None or args.epsilon != "auto":
        if args.damping == "one_over_n" and args.epsilon != "auto":
            raise ConfigInvalid("--epsilon must be 'auto' with --damping one_over_n")
        kind = args.damping or "fixed"
        eps0 = 1.0 if args.epsilon == "auto" else args.epsilon
        damping = DampingSchedule(kind, eps0, args.tau, args.kappa)
    cfg = RunConfig(algorithm=args.alg, minibatch=args.minibatch, partitions=args.k,
                    alpha=args.alpha, passes=args.passes, sweep=args.sweep, seed=args.seed,
                    tol=args.tol, damping=damping, stride=args.stride, gh_order=args.gh_order)
    mcmc = McmcConfig(steps=args.mcmc_steps, burn_in=args.mcmc_burn_in,
                      proposal_scale=args.mcmc_scale, seed=args.mcmc_seed,
                      chains=args.mcmc_chains)
    if args.data is None:
        raise ConfigInvalid("--data is required (flag or spec file)")
    out = args.out or str(_out_root() / args.alg)
    return ExperimentSpec(data=args.data, out=out, run=cfg, test_fraction=args.test_fraction,
                          standardize=args.standardize, gamma=args.gamma, sigma=args.sigma,
                          j=args.j, oracle=args.oracle, reference=args.reference, mcmc=mcmc,
                          timing=not args.no_timing)


def execute(spec: ExperimentSpec) -> int:
    if not Path(spec.data).exists():
        raise SchemaError(f"data file {spec.data} not found")
    train, test, model, _ = prepare_data(spec)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    likelihood = build_likelihood(spec.run, train, model)
    prior = default_prior(likelihood, spec.gamma)
    reference = build_reference(spec, train, model, prior)
    if reference is not None:
        _dump_json(reference.to_dict(), out / "reference.json")
    if spec.timing:
        clock = __import__("time").perf_counter
    else:
        def clock():
            return 0.0

    trace_fh = open(out / "trace.csv", "w", newline="", encoding="utf-8")
    states_fh = open(out / "states.jsonl", "w", encoding="utf-8")
    writer = csv.writer(trace_fh, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    rows = []

    def on_row(row, qm):
        rows.append(row)
        writer.writerow([_fmt(getattr(row, c)) for c in TRACE_COLUMNS])
        trace_fh.flush()
        states_fh.write(json.dumps(_state_record(row.iter, qm)) + "\n")
        states_fh.flush()

    summary = {"version": __version__, "config": spec.to_dict()}
    trace = None
    try:
        trace = run(spec.run, train, reference, model=model, prior=prior, gamma=spec.gamma,
                    test=test, clock=clock, on_row=on_row)
    except KeyboardInterrupt:
        summary["interrupted"] = True
    finally:
        trace_fh.close()
        states_fh.close()
    if trace is None:
        summary["rows"] = len(rows)
        _dump_json(summary, out / "summary.json")
        return 130
    final = trace.final
    summary.update({
        "interrupted": False,
        "final": {c: getattr(final, c) for c in TRACE_COLUMNS if c != "wall_ms"},
        "updates": trace.updates,
        "skipped": trace.skipped,
        "passes_run": trace.passes_run,
        "converged": trace.converged,
        "n_train": train.n,
        "n_test": 0 if test is None else test.n,
        "param_counts": param_counts(trace.state),
    })
    _dump_json(summary, out / "summary.json")
    print(out)
    if trace.updates and trace.skipped == trace.updates:
        print("error: every update was skipped", file=sys.stderr)
        return 4
    return 0


def cmd_run(args) -> int:
    return execute(spec_from_args(args))


# ---------------------------------------------------------------- eval

def read_trace(run_dir: Path) -> list[dict]:
    p = run_dir / "trace.csv"
    if not p.exists():
        raise SchemaError(f"{p} not found")
    with open(p, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != TRACE_COLUMNS:
        raise SchemaError(f"{p} does not have the trace columns {TRACE_COLUMNS}")
    return [{k: (int(v) if k == "iter" else float(v)) for k, v in r.items()} for r in rows]


def read_states(run_dir: Path) -> dict:
    p = run_dir / "states.jsonl"
    out = {}
    if p.exists():
        for line in p.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            if rec["mean"] is not None:
                out[rec["iter"]] = GaussianMoment(np.asarray(rec["mean"]), np.asarray(rec["cov"]))
    return out


def rescore(rows, states, reference: Reference):
    """Recompute the reference-dependent columns from stored states."""
    for r in rows:
        qm = states.get(r["iter"])
        if qm is None:
            continue
        try:
            r.update(reference.compare(qm))
        except DimensionMismatch as exc:
            raise MissingReference(f"reference does not match run dimensions: {exc}") from exc
    return rows


def _labels(run_dirs) -> list[str]:
    labels = []
    for i, d in enumerate(run_dirs):
        name = Path(d).resolve().name or f"run{i}"
        labels.append(name if name not in labels else f"{name}_{i}")
    return labels


def compare_runs(run_dirs, reference: Reference | None):
    """Columns ``<run>.<metric>`` aligned on iteration, plus ``.diff`` vs the first run."""
    labels = _labels(run_dirs)
    tables = []
    for d in run_dirs:
        rows = read_trace(Path(d))
        if reference is not None:
            rows = rescore(rows, read_states(Path(d)), reference)
        tables.append({r["iter"]: r for r in rows})
    iters = sorted(set().union(*tables))
    header = ["iter"]
    for lab in labels:
        header += [f"{lab}.{m}" for m in EVAL_METRICS]
    for lab in labels[1:]:
        header += [f"{lab}.{m}.diff" for m in EVAL_METRICS]
    nan = float("nan")
    body = []
    for it in iters:
        line = [it]
        for t in tables:
            line += [t[it][m] if it in t else nan for m in EVAL_METRICS]
        base = tables[0].get(it)
        for t in tables[1:]:
            for m in EVAL_METRICS:
                if base is None or it not in t:
                    line.append(nan)
                else:
                    line.append(t[it][m] - base[m])
        body.append(line)
    return header, body, labels


def cmd_eval(args) -> int:
    run_dirs = [Path(d) for d in args.runs]
    for d in run_dirs:
        if not d.is_dir():
            raise SchemaError(f"run directory {d} not found")
    if args.reference:
        reference = load_reference(args.reference)
    else:
        found = [d / "reference.json" for d in run_dirs if (d / "reference.json").exists()]
        if not found:
            raise MissingReference("no --reference given and no run directory has reference.json")
        reference = load_reference(found[0])
    header, body, labels = compare_runs(run_dirs, reference)
    out = Path(args.out) if args.out else _out_root() / "comparison.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for line in body:
            w.writerow([_fmt(v) for v in line])
    if args.plot:
        from .plotting import plot_comparison

        for p in plot_comparison(header, body, labels, out.with_suffix("")):
            print(p)
    print(out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochep", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stochep {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset and its truth sidecar")
    g.add_argument("kind", choices=("probit", "mog"))
    g.add_argument("--n", type=_positive_int, default=None)
    g.add_argument("--d", type=_positive_int, default=None)
    g.add_argument("--inputs", choices=("gaussian", "mog"), default="gaussian")
    g.add_argument("--j", type=_positive_int, default=None)
    g.add_argument("--gamma", type=_positive_float, default=1.0)
    g.add_argument("--sigma", type=_positive_float, default=0.5)
    g.add_argument("--center", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None, help=f"CSV path (default ${OUTPUT_ENV}/<kind>.csv)")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run one algorithm and write its trace")
    r.add_argument("--spec", default=None, help="JSON file whose keys are flag names")
    r.add_argument("--data", default=None)
    r.add_argument("--alg", choices=ALGORITHMS, default="sep")
    r.add_argument("--epsilon", type=_epsilon, default="auto")
    r.add_argument("--damping", choices=SCHEDULES, default=None)
    r.add_argument("--tau", type=_positive_float, default=1.0)
    r.add_argument("--kappa", type=_positive_float, default=1.0)
    r.add_argument("--minibatch", type=_positive_int, default=1)
    r.add_argument("--k", type=_positive_int, default=1, help="DSEP partition count")
    r.add_argument("--alpha", type=_positive_float, default=1.0)
    r.add_argument("--passes", type=int, default=20)
    r.add_argument("--sweep", choices=SWEEPS, default="shuffled")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--tol", type=float, default=1e-4)
    r.add_argument("--stride", type=_positive_int, default=None)
    r.add_argument("--gh-order", type=_positive_int, default=64)
    r.add_argument("--test-fraction", type=float, default=0.0)
    r.add_argument("--standardize", choices=("auto", "yes", "no"), default="auto")
    r.add_argument("--gamma", type=_positive_float, default=1.0, help="prior variance")
    r.add_argument("--sigma", type=_positive_float, default=None)
    r.add_argument("--j", type=_positive_int, default=None)
    r.add_argument("--oracle", choices=("none", "mcmc", "grid"), default="none")
    r.add_argument("--reference", default=None, help="reuse reference moments from a JSON file")
    r.add_argument("--mcmc-steps", type=_positive_int, default=20000)
    r.add_argument("--mcmc-burn-in", type=int, default=5000)
    r.add_argument("--mcmc-scale", type=_positive_float, default=0.1)
    r.add_argument("--mcmc-seed", type=int, default=0)
    r.add_argument("--mcmc-chains", type=_positive_int, default=4)
    r.add_argument("--no-timing", action="store_true", help="write wall_ms as 0")
    r.add_argument("--out", default=None, help=f"run directory (default ${OUTPUT_ENV}/<alg>)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="compare run traces against reference moments")
    e.add_argument("runs", nargs="+")
    e.add_argument("--reference", default=None)
    e.add_argument("--out", default=None)
    e.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSV")
    e.set_defaults(func=cmd_eval)
    return parser


_GEN_DEFAULTS = {"probit": {"n": 5000, "d": 4, "j": 5}, "mog": {"n": 200, "d": 2, "j": 4}}


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run" and args.spec:
        try:
            with open(args.spec, encoding="utf-8") as fh:
                spec = json.load(fh)
        except (OSError, ValueError) as exc:
            parser.error(f"--spec: cannot read {args.spec}: {exc}")
        run_parser = parser._subparsers._group_actions[0].choices["run"]
        known = {a.dest for a in run_parser._actions}
        spec = {k.replace("-", "_"): v for k, v in spec.items()}
        unknown = sorted(set(spec) - known)
        if unknown:
            parser.error(f"--spec: unknown keys {unknown}")
        # explicit flags win over the spec file
        run_parser.set_defaults(**spec)
        args = parser.parse_args(argv)
    if args.command == "gen":
        for k, v in _GEN_DEFAULTS[args.kind].items():
            if getattr(args, k) is None:
                setattr(args, k, v)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StochEPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
