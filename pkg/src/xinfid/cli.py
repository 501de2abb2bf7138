"""Command-line front end: ``xinfid {explain,evaluate,verify,sanity-check,render}``."""
import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .explainers import (
    GLOBAL,
    ConstantExplainer,
    GaussianKernel,
    GlobalExplainer,
    GradientExplainer,
    IntegratedGradientsExplainer,
    MaskedOptimalExplainer,
    Occlusion1Explainer,
    OptimalExplainer,
    ShapleyExplainer,
    SmoothedExplainer,
    UniformBoxKernel,
)
from .measures import STREAM_INFD, MeasureConfig, evaluate_measures
from .models import MlpModel, ModelFormatError, ToyFunction, load_model
from .numerics import RngStream
from .perturbations import (
    BaselineDiff,
    CoordinateEps,
    CoordinateTimesX,
    MultiBaseline,
    NoisyBaseline,
    ShapleyKernel,
    SquareRemoval,
    SubsetBaseline,
)
from .verify import SUITES, run_sanity_check, run_suite, worker_count

FORMAT_VERSION = 1
EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2
BASE_METHODS = ("grad", "ig", "occlusion", "shapley", "optimal", "optimal-masked", "constant")
# stream ids for explainer randomness, disjoint from the measure streams
_STREAM_OPT, _STREAM_SMOOTH, _STREAM_SANITY = 11, 12, 13


class UsageError(Exception):
    """Invalid invocation; reported with exit code 2."""


# Spec strings -----------------------------------------------------------------


def parse_spec(text):
    """Split ``name:key=value,key=value`` into ``(name, {key: value})``."""
    name, _, rest = text.strip().partition(":")
    params = {}
    for item in filter(None, (p.strip() for p in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"malformed parameter {item!r} in {text!r}; expected key=value")
        params[key.strip()] = value.strip()
    return name.strip(), params


def _vector_or_scalar(value):
    if value in ("zero", "0"):
        return None
    parts = value.split(";")
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"cannot parse baseline {value!r}") from None
    return nums[0] if len(nums) == 1 else np.array(nums)


def _take(params, key, conv, default, spec):
    if key not in params:
        return default
    try:
        return conv(params.pop(key))
    except ValueError:
        raise UsageError(f"bad value for {key!r} in {spec!r}") from None


def parse_perturbation(text):
    """Build a perturbation family from a spec string such as ``noisy-baseline:sigma=0.5``."""
    name, p = parse_spec(text)
    if name == "baseline":
        fam = BaselineDiff(_vector_or_scalar(p.pop("x0", "zero")))
    elif name == "subset-baseline":
        subset = tuple(int(v) for v in p.pop("subset", "").split(";") if v)
        fam = SubsetBaseline(subset, _vector_or_scalar(p.pop("x0", "zero")))
    elif name == "noisy-baseline":
        x0 = _vector_or_scalar(p.pop("x0", "zero"))
        fam = NoisyBaseline(x0, _take(p, "sigma", float, 1.0, text))
    elif name == "multi-baseline":
        if "file" not in p:
            raise UsageError("multi-baseline needs file=<csv of baselines>")
        fam = MultiBaseline(tuple(map(tuple, read_inputs(p.pop("file")))))
    elif name == "coord-eps":
        fam = CoordinateEps(_take(p, "eps", float, 1e-3, text))
    elif name == "coord-x":
        fam = CoordinateTimesX()
    elif name == "shapley":
        fam = ShapleyKernel()
    elif name == "square":
        fam = SquareRemoval(_take(p, "h", int, 28, text), _take(p, "w", int, 28, text),
                            _take(p, "smin", int, 1, text), _take(p, "smax", int, 10, text))
    else:
        raise UsageError(f"unknown perturbation {name!r}; choose from baseline, subset-baseline, "
                         "noisy-baseline, multi-baseline, coord-eps, coord-x, shapley, square")
    if p:
        raise UsageError(f"unknown parameters {sorted(p)} for perturbation {name!r}")
    return fam


def parse_kernel(text):
    name, p = parse_spec(text)
    if name == "gaussian":
        kernel = GaussianKernel(_take(p, "sigma", float, 0.2, text))
    elif name in ("uniform", "box"):
        kernel = UniformBoxKernel(_take(p, "radius", float, 0.2, text))
    else:
        raise UsageError(f"unknown kernel {name!r}; choose gaussian or uniform")
    if p:
        raise UsageError(f"unknown parameters {sorted(p)} for kernel {name!r}")
    return kernel


def _split_method(method):
    base, smoothed, global_ = method, False, False
    while True:
        if base.endswith("-global"):
            base, global_ = base[: -len("-global")], True
        elif base.endswith("-sg"):
            base, smoothed = base[: -len("-sg")], True
        else:
            break
    if base not in BASE_METHODS:
        raise UsageError(f"unknown method {method!r}; base methods are {', '.join(BASE_METHODS)}, "
                         "optionally suffixed with -sg and/or -global")
    return base, smoothed, global_


def method_locality(method, family):
    """Locality of ``method``; raises :class:`UsageError` if it cannot run with ``family``."""
    base, _, global_ = _split_method(method)
    if base == "optimal-masked" and (family is None or not family.masked):
        raise UsageError(f"method {method!r} needs a mask-structured perturbation (shapley, square, coord-x)")
    if base == "optimal" and family is None:
        raise UsageError(f"method {method!r} needs --perturbation")
    native_global = base in ("occlusion", "shapley", "optimal-masked")
    if global_ and native_global:
        raise UsageError(f"method {method!r} is already global")
    return GLOBAL if (global_ or native_global) else "local"


def build_explainer(method, d, family, kernel, args, input_index=0):
    base, smoothed, global_ = _split_method(method)
    seed = args.seed
    opt_stream = RngStream(seed, (_STREAM_OPT,))
    n_opt = args.n_opt
    if getattr(args, "shared_samples", False):
        # fit on exactly the sample set the infidelity is scored on
        opt_stream, n_opt = RngStream(seed, (STREAM_INFD, input_index)), args.n_infd
    if base == "grad":
        ex = GradientExplainer()
    elif base == "ig":
        ex = IntegratedGradientsExplainer(steps=args.ig_steps)
    elif base == "occlusion":
        ex = Occlusion1Explainer()
    elif base == "shapley":
        ex = ShapleyExplainer()
    elif base == "optimal":
        ex = OptimalExplainer(family, n_opt, args.lam, opt_stream)
    elif base == "optimal-masked":
        ex = MaskedOptimalExplainer(family, n_opt, args.lam, opt_stream)
    else:
        # fixed and model independent, but not uniform so it has rank structure
        ramp = np.arange(1.0, d + 1.0)
        ex = ConstantExplainer(ramp / np.linalg.norm(ramp))
    if global_:
        ex = GlobalExplainer(ex)
    if smoothed:
        ex = SmoothedExplainer(ex, kernel, args.n_smooth, RngStream(seed, (_STREAM_SMOOTH,)))
    ex.tag = method
    return ex


# Files ------------------------------------------------------------------------


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_inputs(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"inputs file not found: {path}")
    try:
        X = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError as exc:
        raise UsageError(f"cannot parse inputs file {path}: {exc}") from None
    if X.size == 0:
        raise UsageError(f"inputs file {path} is empty")
    return X


def parse_input_vector(text):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse input vector {text!r}") from None


def resolve_model(spec):
    if not spec:
        raise UsageError("--model is required")
    if spec == "toy":
        return ToyFunction()
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"model file not found: {path}")
    try:
        return load_model(path)
    except (ModelFormatError, ValueError) as exc:
        raise UsageError(f"invalid model file {path}: {exc}") from None


def format_attribution(values, method, locality, seed):
    out = io.StringIO()
    out.write(f"# method={method} locality={locality} seed={seed}\n")
    out.write("index,value\n")
    for i, v in enumerate(values):
        out.write(f"{i},{float(v)!r}\n")
    return out.getvalue()


def read_attribution(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"attribution file not found: {path}")
    rows = [r for r in csv.reader(line for line in path.read_text().splitlines() if not line.startswith("#"))]
    if not rows or rows[0] != ["index", "value"]:
        raise UsageError(f"{path} is not an attribution file (expected an 'index,value' header)")
    try:
        pairs = sorted((int(i), float(v)) for i, v in rows[1:])
    except ValueError:
        raise UsageError(f"malformed row in {path}") from None
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise UsageError(f"{path}: indices must be 0..d-1")
    return np.array([v for _, v in pairs])


def graymap(values, height, width):
    """Binary PGM bytes: values standardised, clamped to 3 sigma and mapped to 0..255.

    A constant attribution maps to mid-gray.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size != height * width:
        raise ValueError(f"attribution has {v.size} values; {height}x{width} needs {height * width}")
    std = v.std()
    # a constant vector can still have a rounding-level spread
    flat = std <= 1e-12 * float(np.max(np.abs(v), initial=0.0))
    z = np.zeros_like(v) if flat else (v - v.mean()) / std
    pix = np.floor((np.clip(z, -3.0, 3.0) + 3.0) / 6.0 * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pix.tobytes()


# Commands ---------------------------------------------------------------------


def _inputs(args):
    rows = [parse_input_vector(s) for s in (args.input or [])]
    if args.inputs:
        rows.extend(read_inputs(args.inputs))
    if not rows:
        raise UsageError("no inputs: pass --input or --inputs")
    if len({r.size for r in rows}) != 1:
        raise UsageError("all inputs must have the same length")
    return np.vstack(rows)


def _methods(args):
    methods = [m for chunk in (args.methods or []) for m in chunk.split(",") if m]
    if not methods:
        raise UsageError("no methods given")
    return methods


def _common_setup(args, need_family):
    model = resolve_model(args.model)
    X = _inputs(args)
    if X.shape[1] != model.input_dim:
        raise UsageError(f"inputs have dimension {X.shape[1]}, model expects {model.input_dim}")
    family = parse_perturbation(args.perturbation) if args.perturbation else None
    if need_family and family is None:
        raise UsageError("--perturbation is required")
    kernel = parse_kernel(args.kernel)
    methods = _methods(args)
    for m in methods:
        loc = method_locality(m, family)
        if need_family and loc == GLOBAL and not family.masked:
            raise UsageError(f"method {m!r} gives a global attribution, which can only be scored with a "
                             f"mask-structured perturbation (shapley, square, coord-x); got {args.perturbation!r}")
    return model, X, family, kernel, methods


def _run_jobs(fn, jobs, threads):
    workers = worker_count(threads)
    if workers == 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def cmd_explain(args):
    model, X, family, kernel, methods = _common_setup(args, need_family=False)
    out_dir = Path(args.out_dir)

    def job(item):
        k, method = item
        ex = build_explainer(method, X.shape[1], family, kernel, args, k)
        attr = ex.explain(model, X[k])
        path = out_dir / f"attr_{k:04d}_{method}.csv"
        atomic_write(path, format_attribution(attr.values, method, attr.locality, args.seed))
        return path

    for path in _run_jobs(job, [(k, m) for k in range(len(X)) for m in methods], args.threads):
        print(path)
    return EXIT_OK


def _measure_config(args):
    return MeasureConfig(
        n_infd=args.n_infd, n_sens=args.n_sens, radius_r=args.radius, ball_norm=args.ball,
        apply_optimal_scaling=not args.no_scaling, apply_unit_normalization=not args.no_normalization,
        seed=args.seed,
    )


def cmd_evaluate(args):
    model, X, family, kernel, methods = _common_setup(args, need_family=True)
    cfg = _measure_config(args)

    def job(item):
        k, method = item
        ex = build_explainer(method, X.shape[1], family, kernel, args, k)
        rep = evaluate_measures(model, ex, X[k], family, cfg, k, args.sens_grad, args.sens_lips, args.rinfd)
        return {"input_index": k, "method": method, **rep.as_dict()}

    records = _run_jobs(job, [(k, m) for k in range(len(X)) for m in methods], args.threads)
    summary = {}
    for m in methods:
        recs = [r for r in records if r["method"] == m]
        entry = {"n_inputs": len(recs)}
        for key in ("infidelity", "sens_max", "sens_grad", "sens_lips", "rinfd"):
            vals = [r[key] for r in recs if r[key] is not None]
            if vals:
                entry[f"mean_{key}"] = math.fsum(vals) / len(vals)
        summary[m] = entry
    report = {
        "format_version": FORMAT_VERSION,
        "config": {
            "model": args.model, "perturbation": args.perturbation, "kernel": args.kernel,
            "methods": methods, "seed": args.seed, "n_infd": cfg.n_infd, "n_sens": cfg.n_sens,
            "radius_r": cfg.radius_r, "ball_norm": cfg.ball_norm, "diff_norm": cfg.diff_norm,
            "apply_optimal_scaling": cfg.apply_optimal_scaling,
            "apply_unit_normalization": cfg.apply_unit_normalization,
            "n_opt": args.n_opt, "n_smooth": args.n_smooth, "shared_samples": args.shared_samples,
        },
        "records": records,
        "summary": summary,
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    if args.csv:
        keys = ["input_index", "method", "infidelity", "infidelity_se", "sens_max", "sens_grad",
                "sens_lips", "rinfd", "scaling_alpha", "zero_attribution"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in records:
            w.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in keys])
        atomic_write(args.csv, buf.getvalue())
    return EXIT_OK


def cmd_verify(args):
    if args.suite != "all" and args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from all, {', '.join(SUITES)}")
    results = run_suite(args.suite, args.seed, args.threads, args.n_models)
    lines = [json.dumps(r.as_dict(), sort_keys=True) for r in results]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAILED {r.check_name}: lhs={r.lhs!r} rhs={r.rhs!r} slack={r.slack_used!r} "
              f"context={json.dumps(r.context, sort_keys=True)}", file=sys.stderr)
    n_app = sum(r.applicable for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} passed ({n_app} applicable)", file=sys.stderr)
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_sanity(args):
    model = resolve_model(args.model)
    if not isinstance(model, MlpModel):
        raise UsageError("sanity-check needs an MLP model file")
    X = _inputs(args)
    family = parse_perturbation(args.perturbation) if args.perturbation else None
    kernel = parse_kernel(args.kernel)
    explainers = {}
    for m in _methods(args):
        method_locality(m, family)
        explainers[m] = build_explainer(m, X.shape[1], family, kernel, args)
    rows = run_sanity_check(model, X, explainers, RngStream(args.seed, (_STREAM_SANITY,)))
    out = [{"method": n, "corr": c, "corr_abs": a, "passes": abs(c) < args.threshold} for n, c, a in rows]
    text = json.dumps({"format_version": FORMAT_VERSION, "seed": args.seed, "results": out},
                      indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_render(args):
    values = read_attribution(args.attribution)
    try:
        data = graymap(values, args.height, args.width)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    atomic_write(args.out, data)
    return EXIT_OK


# Parser -----------------------------------------------------------------------


def _add_run_options(p, evaluate=False):
    p.add_argument("--model", help="model JSON file, or 'toy' (required, may come from --config)")
    p.add_argument("--input", action="append", help="one comma-separated input vector (repeatable)")
    p.add_argument("--inputs", help="CSV file, one input vector per row")
    p.add_argument("--method", "--methods", dest="methods", action="append",
                   help="comma-separated methods, e.g. grad,grad-sg,optimal")
    p.add_argument("--perturbation", help="e.g. noisy-baseline:sigma=0.5 or square:h=28,w=28")
    p.add_argument("--kernel", default="uniform:radius=0.2", help="smoothing kernel for -sg methods")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-opt", type=int, default=20000, help="draws for optimal explanations")
    p.add_argument("--n-smooth", type=int, default=200, help="kernel draws for -sg methods")
    p.add_argument("--ig-steps", type=int, default=128)
    p.add_argument("--lam", type=float, default=0.0, help="ridge for optimal explanations")
    p.add_argument("--threads", type=int, default=None, help="workers (default XINFID_THREADS, 0 = auto)")
    p.add_argument("--config", help="JSON file with defaults for any of these options")
    if evaluate:
        p.add_argument("--n-infd", type=int, default=1000)
        p.add_argument("--n-sens", type=int, default=50)
        p.add_argument("--radius", type=float, default=0.1)
        p.add_argument("--ball", choices=("inf", "l2"), default="inf")
        p.add_argument("--no-scaling", action="store_true", help="disable optimal scaling")
        p.add_argument("--no-normalization", action="store_true", help="disable unit normalisation")
        p.add_argument("--sens-grad", action="store_true")
        p.add_argument("--sens-lips", action="store_true")
        p.add_argument("--rinfd", type=int, default=0, metavar="N", help="robust infidelity with N shifts")
        p.add_argument("--shared-samples", action="store_true",
                       help="fit optimal methods on the infidelity sample set")
        p.add_argument("--out", help="report JSON path (default stdout)")
        p.add_argument("--csv", help="also write per-record CSV")


def build_parser():
    parser = argparse.ArgumentParser(prog="xinfid", description="Infidelity and sensitivity of explanations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="write attribution CSVs")
    _add_run_options(p)
    p.add_argument("--out-dir", default=".", help="directory for attribution files")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="infidelity and sensitivity report")
    _add_run_options(p, evaluate=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", help="run the verification suite")
    p.add_argument("--suite", default="all", help=f"all, {', '.join(SUITES)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-models", type=int, default=20)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", help="records file, one JSON object per line (default stdout)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sanity-check", help="rank correlation after randomising the last layer")
    _add_run_options(p)
    p.add_argument("--threshold", type=float, default=0.5, help="|corr| below this passes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sanity)

    p = sub.add_parser("render", help="attribution CSV to a PGM image")
    p.add_argument("attribution")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def _apply_config(parser, argv):
    """Reparse with defaults taken from ``--config`` so explicit flags still win."""
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON in {path}: {exc}") from None
    known = vars(args)
    unknown = sorted(k for k in doc if k.replace("-", "_") not in known)
    if unknown:
        raise UsageError(f"unknown keys in {path}: {unknown}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    defaults = {k.replace("-", "_"): v for k, v in doc.items()}
    # list-valued options are filled in after parsing so flags replace them
    lists = {k: defaults.pop(k) for k in ("methods", "input") if k in defaults}
    sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    for key, value in lists.items():
        if getattr(args, key) is None:
            value = [value] if isinstance(value, str) else value
            if key == "methods":
                setattr(args, key, [",".join(value)])
            else:
                # input vectors may be given as strings or as lists of numbers
                setattr(args, key, [v if isinstance(v, str) else ",".join(map(repr, map(float, v))) for v in value])
    return args


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"xinfid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
