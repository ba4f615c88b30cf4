"""Command-line runner: ``nlcs gen|sample|oudiag|bench``.

Exit codes: 0 ok, 2 bad input, 3 numeric divergence, 4 budget exceeded.
Every command writes ``manifest.json`` next to its outputs. The manifest hash
covers the spec, command and configuration; JSON outputs embed it and every
output file is listed with its sha256 digest.
"""

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time

import numpy as np
import pydantic
import scipy

from . import __version__, instances, metrics, oudiag, sampler, specio
from .errors import (BudgetError, CapabilityError, ConvergenceError, DegeneracyError,
                     DivergenceError, DomainError, GridTooSmallError, NumericError, PackingError)
from .oracle import QueryLedger, counted, hs_components, make_mixture

log = logging.getLogger("nlcs")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGENCE, EXIT_BUDGET = 0, 2, 3, 4
SWEEP_HEADER = "t,opnorm,method,mc_stderr,bound"
SCOREBOARD_HEADER = "instance,algo,value_q,grad_q,success"
DEFAULT_T_LIST = "0,1,1.25,1.5,2,3"


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _finite(x):
    return x if x is None or math.isfinite(x) else None


class Run:
    """Collects outputs of one command and writes the manifest."""

    def __init__(self, command, spec, config, out):
        self.command = command
        self.out = out
        self.started = time.perf_counter()
        self.spec = None if spec is None else specio.spec_dict(spec)
        self.config = config
        payload = _dump_json({"spec": self.spec, "command": command, "config": config})
        self.hash = hashlib.sha256(payload.encode()).hexdigest()
        self.outputs = {}
        os.makedirs(out, exist_ok=True)

    def write(self, name, text):
        path = os.path.join(self.out, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.outputs[name] = hashlib.sha256(text.encode()).hexdigest()
        return path

    def finish(self):
        manifest = {
            "hash": self.hash, "command": self.command, "spec": self.spec, "config": self.config,
            "outputs": self.outputs,
            "versions": {"nlcs": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "pydantic": pydantic.__version__},
            "wall_time": time.perf_counter() - self.started,
        }
        self.write("manifest.json", _dump_json(manifest))
        return manifest


def _csv(header, rows):
    lines = [header] + [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _load(args, required=True):
    if args.spec is None:
        if required:
            raise InputError("--spec is required")
        return None
    return specio.load_spec(args.spec)


def _param(args, spec, name, default=None):
    value = getattr(args, name)
    if value is None and spec is not None:
        value = getattr(spec.params, name, None)
    if value is None:
        value = default
    if value is None:
        raise InputError(f"--{name} is required for this instance")
    return value


def _config(args, keys):
    return {k: getattr(args, k.replace("-", "_")) for k in keys}


def cmd_gen(args):
    spec = _load(args, required=False)
    if spec is None:
        if None in (args.d, args.L, args.M, args.eps):
            raise InputError("gen needs --spec or all of --d --L --M --eps")
        spec = specio.parse_spec({"kind": "lb_base", "seed": args.seed or 0,
                                  "params": {"d": args.d, "L": args.L, "M": args.M, "eps": args.eps}})
    run = Run("gen", spec, {}, args.out)
    _, derived = specio.build_instance(spec)
    doc = {"spec": specio.spec_dict(spec), "derived": derived, "manifest_hash": run.hash}
    run.write("instance.json", _dump_json(doc))
    run.finish()
    return EXIT_OK


def cmd_sample(args):
    spec = _load(args)
    oracle, _ = specio.build_instance(spec)
    L = _param(args, spec, "L")
    M = _param(args, spec, "M")
    eps = _param(args, spec, "eps")
    seed = args.seed if args.seed is not None else spec.seed
    config = dict(_config(args, ["n", "N_steps", "h", "threads", "budget"]), L=L, M=M, eps=eps, seed=seed)
    run = Run("sample", spec, config, args.out)
    overrides = {}
    if args.N_steps is not None:
        overrides["N"] = args.N_steps
    if args.h is not None:
        overrides["h"] = args.h
    samples, report = sampler.sample_nonlogconcave(
        oracle, L, M, eps, args.n, overrides, seed=seed, budget=args.budget, threads=args.threads)
    d = oracle.dim
    if d <= 2 and len(samples) >= metrics.MIN_HISTOGRAM_SAMPLES:
        report.tv_estimate = metrics.tv_histogram(samples, oracle).tv
    report.samples_path = "samples.csv"
    run.write("samples.csv", _csv(",".join(f"x{j}" for j in range(d)), samples))
    body = report.as_dict()
    body["N_theorem"] = _finite(body["N_theorem"])
    body["manifest_hash"] = run.hash
    run.write("report.json", _dump_json(body))
    run.finish()
    return EXIT_OK


def _parse_times(text):
    try:
        ts = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"bad --t-list: {text}") from exc
    if not ts or any(t < 0 or not math.isfinite(t) for t in ts):
        raise InputError("--t-list needs non-negative times")
    return ts


def _equal_cov_pair(mix):
    if mix.size != 2 or not np.allclose(mix.covs[0], mix.covs[1]):
        return None
    delta = mix.means[0] - mix.means[1]
    return float(delta @ delta)


def _mixture_rows(mix, ts, method, n_mc, probes, seed, bound_of):
    rows = []
    base = make_mixture(mix)
    for t in ts:
        evolved = oudiag.evolve_mixture(mix, t)
        points = _probe_points(evolved, probes, seed)
        for x in points:
            if method == oudiag.CLOSED_FORM:
                probe = oudiag.closed_form_probe(mix, t, x)
            elif method == oudiag.FINITE_DIFFERENCE:
                probe = oudiag.fd_probe(make_mixture(evolved), t, x)
            elif t == 0.0:
                probe = oudiag.closed_form_probe(mix, t, x)
            else:
                probe = oudiag.score_hessian_via_cov(base, t, x, n_mc, seed)
            rows.append((t, probe.opnorm, probe.method, probe.mc_stderr, bound_of(t)))
    return rows


def _probe_points(evolved, probes, seed):
    if evolved.size <= 16:
        return oudiag.mixture_probe_points(evolved, probes, seed)
    radius = 3.0 * max(float(np.linalg.norm(evolved.means, axis=1).max()), 1.0)
    return np.vstack([metrics.ball_points(evolved.dim, radius, probes, seed), np.zeros(evolved.dim)])


def _stitched_rows(oracle, ts, method, n_mc, seed):
    if method in (oudiag.CLOSED_FORM, oudiag.FINITE_DIFFERENCE):
        raise InputError("stitched instances support only the covariance-identity method")
    u = np.asarray(oracle.meta["params"]["u"], dtype=float)
    s = float(u @ u)
    rows = []
    for t in ts:
        bound = math.exp(-2.0 * t) * s - 1.0
        x0 = 0.5 * math.exp(-t) * u
        if t == 0.0:
            probe = oudiag.fd_probe(oracle, 0.0, x0)
        else:
            try:
                probe = oudiag.score_hessian_via_cov(oracle, t, x0, n_mc, seed)
            except DegeneracyError as exc:
                # keep the row so the sweep shape is stable; blank value marks it
                log.warning("t=%g: %s", t, exc)
                rows.append((t, None, oudiag.COVARIANCE_IDENTITY, None, bound))
                continue
        rows.append((t, probe.opnorm, probe.method, probe.mc_stderr, bound))
    return rows


def cmd_oudiag(args):
    spec = _load(args)
    if spec.kind not in ("mixture", "stitched", "hs"):
        raise InputError(f"oudiag does not support kind {spec.kind!r}")
    ts = _parse_times(args.t_list)
    method = args.method
    seed = args.seed if args.seed is not None else spec.seed
    config = dict(_config(args, ["t_list", "method", "n", "probes"]), seed=seed)
    run = Run("oudiag", spec, config, args.out)
    oracle, _ = specio.build_instance(spec)
    n_mc = max(args.n, 1000)
    if spec.kind == "stitched":
        rows = _stitched_rows(oracle, ts, "auto" if method == "auto" else method, n_mc, seed)
    else:
        if method == "auto":
            method = oudiag.CLOSED_FORM
        if spec.kind == "mixture":
            mix = oracle.spec
            gap = _equal_cov_pair(mix)

            def bound_of(t):
                return None if gap is None else max(1.0, math.exp(-2.0 * t) * gap)
        else:
            J = np.asarray(spec.params.J, dtype=float)
            h = np.asarray(spec.params.h, dtype=float)
            if h.size > 10:
                raise InputError("hs sweeps use the explicit mixture form and need d <= 10")
            mix = hs_components(J, h)
            delta = oudiag.hs_delta(J)

            def bound_of(t):
                return oudiag.hs_evolution_bounds(J, h, t, delta)[1] if 0 < delta < 0.5 else None
        rows = _mixture_rows(mix, ts, method, n_mc, args.probes, seed, bound_of)
    run.write("sweep.csv", _csv(SWEEP_HEADER, rows))
    run.finish()
    return EXIT_OK


def grid_search(oracle, R, r, d, eps):
    """Query bump-lattice centers in order until one has value below -eps/2.

    Returns ``(ledger, found)``.
    """
    ledger = QueryLedger()
    probe = counted(oracle, ledger)
    for c in instances.pack_opt_centers(R, r, d):
        if probe.value(c) < -0.5 * eps:
            return ledger, True
    return ledger, False


def _bench_row(name, spec, algo, args):
    oracle, _ = specio.build_instance(spec)
    p = spec.params
    eps = args.eps if args.eps is not None else getattr(p, "eps", None)
    if algo == "grid_search":
        if spec.kind != "opt":
            return (name, algo, 0, 0, False)
        ledger, found = grid_search(oracle, p.R, instances.bump_radius(p.L, p.eps), p.d, p.eps)
        return (name, algo, ledger.value_queries, ledger.grad_queries, found)
    L = args.L if args.L is not None else getattr(p, "L", None)
    M = args.M if args.M is not None else 5.0 * p.R**2 if spec.kind == "opt" else getattr(p, "M", None)
    if L is None or M is None or eps is None:
        raise InputError(f"--L, --M and --eps are required for {name}")
    overrides = {} if args.N_steps is None else {"N": args.N_steps}
    try:
        _, report = sampler.sample_nonlogconcave(oracle, L, M, eps, args.n, overrides, seed=args.seed or 0,
                                                 budget=args.budget, threads=args.threads)
    except BudgetError as exc:
        log.warning("%s: %s", name, exc)
        return (name, algo, int(min(exc.projected, 2**62)), 0, False)
    return (name, algo, report.queries["value"], report.queries["grad"], True)


def cmd_bench(args):
    if args.instances is None or not os.path.isdir(args.instances):
        raise InputError("--instances must name a directory of instance specs")
    names = sorted(f for f in os.listdir(args.instances) if f.endswith(".json"))
    if not names:
        raise InputError("no instance files found")
    specs = [(os.path.splitext(f)[0], specio.load_spec(os.path.join(args.instances, f))) for f in names]
    algos = ["grid_search", "sampler"] if args.algo == "both" else [args.algo]
    config = _config(args, ["algo", "n", "N_steps", "L", "M", "eps", "seed", "budget", "threads"])
    config["instances"] = {n: specio.spec_dict(s) for n, s in specs}
    run = Run("bench", None, config, args.out)
    rows = [_bench_row(n, s, a, args) for n, s in specs for a in algos]
    run.write("scoreboard.csv", _csv(SCOREBOARD_HEADER, rows))
    run.finish()
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="nlcs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="instance spec JSON (or a generated instance file)")
    common.add_argument("--d", type=int)
    common.add_argument("--L", type=float)
    common.add_argument("--M", type=float)
    common.add_argument("--eps", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--n", type=int, default=1000, help="samples (or MC draws for oudiag)")
    common.add_argument("--N-steps", dest="N_steps", type=int)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", default=".")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="materialize an instance")
    p = sub.add_parser("sample", parents=[common], help="run the sampler")
    p.add_argument("--h", type=float, help="Langevin step size")
    p.add_argument("--budget", type=float, default=sampler.DEFAULT_CUBE_BUDGET)
    p = sub.add_parser("oudiag", parents=[common], help="OU smoothness sweep")
    p.add_argument("--t-list", dest="t_list", default=DEFAULT_T_LIST)
    p.add_argument("--method", default="auto",
                   choices=["auto", oudiag.CLOSED_FORM, oudiag.FINITE_DIFFERENCE, oudiag.COVARIANCE_IDENTITY])
    p.add_argument("--probes", type=int, default=200)
    p = sub.add_parser("bench", parents=[common], help="query-count scoreboard")
    p.add_argument("--instances", help="directory of instance spec files")
    p.add_argument("--algo", default="both", choices=["both", "sampler", "grid_search"])
    p.add_argument("--budget", type=float, default=sampler.DEFAULT_CUBE_BUDGET)
    return parser


COMMANDS = {"gen": cmd_gen, "sample": cmd_sample, "oudiag": cmd_oudiag, "bench": cmd_bench}


def _field_path(exc):
    err = exc.errors()[0]
    return ".".join(str(p) for p in err["loc"]) + ": " + err["msg"]


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1 or args.n < 1:
        print("error: --threads and --n must be positive", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except pydantic.ValidationError as exc:
        print(f"error: invalid spec at {_field_path(exc)}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, DomainError, PackingError, CapabilityError, GridTooSmallError,
            OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BudgetError as exc:
        print(f"error: {exc} (projected cubes {exc.projected:.4g}, bound {exc.bound:.4g})", file=sys.stderr)
        return EXIT_BUDGET
    except (DivergenceError, NumericError, ConvergenceError, DegeneracyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
