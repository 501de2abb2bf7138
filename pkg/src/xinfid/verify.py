"""Executable checks of the identities and inequalities behind the measures.

Each check returns a :class:`CheckResult` holding both sides of the relation
and the Monte Carlo slack it was granted. Suprema are sampled maxima, and both
sides of an inequality are evaluated on one shared candidate set, so sampling
noise alone cannot produce a failure.
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .explainers import (
    GLOBAL,
    GaussianKernel,
    GradientExplainer,
    IntegratedGradientsExplainer,
    MaskedOptimalExplainer,
    Occlusion1Explainer,
    ShapleyExplainer,
    SmoothedExplainer,
    UniformBoxKernel,
    explain_optimal,
)
from .measures import (
    MeasureConfig,
    ball_offsets,
    infidelity,
    infidelity_residuals,
    robust_infidelity,
    sens_max,
    smoothing_terms,
)
from .models import (
    Layer,
    MlpModel,
    QuadraticModel,
    ToyFunction,
    hessian_norm_bound,
    linear_model,
    randomize_layer,
    random_mlp,
    softplus_sensitivity_bound,
)
from .numerics import (
    RngStream,
    as_stream,
    as_vector,
    sample_uniform_box,
    solve_regularized,
    spearman_correlation,
)
from .perturbations import (
    BaselineDiff,
    CoordinateEps,
    CoordinateTimesX,
    NoisyBaseline,
    ShapleyKernel,
)

__all__ = [
    "CheckResult",
    "SUITES",
    "bumpy_mlp",
    "check_adversarial_bound",
    "check_completeness",
    "check_gradient_limit",
    "check_hessian_bounds",
    "check_occlusion_equivalence",
    "check_rinfd_lower_bound",
    "check_sample_optimality",
    "check_shapley_equivalence",
    "check_smoothing_infidelity",
    "check_smoothing_sensitivity",
    "check_softplus_bound",
    "logistic_loss",
    "run_sanity_check",
    "run_suite",
    "worker_count",
]

LE, GE, EQ = "le", "ge", "eq"
# ridge relative to trace(I I^T) / d; its bias on sum(phi * I) is about this factor times d
COMPLETENESS_RIDGE = 1e-14
# the smoothing-infidelity bound has a positive constant only below this C1
C1_LIMIT = 0.25
_ROUNDING = 1e-12


@dataclass
class CheckResult:
    """Outcome of one check.

    ``kind`` is ``"le"`` (``lhs <= rhs + slack``), ``"ge"``
    (``lhs >= rhs - slack``) or ``"eq"`` (``|lhs - rhs| <= slack``).
    Checks whose hypotheses fail are reported with ``applicable=False`` and
    count as passed.
    """

    check_name: str
    lhs: float
    rhs: float
    slack_used: float
    kind: str = LE
    applicable: bool = True
    context: dict = field(default_factory=dict)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.lhs, self.rhs, self.slack_used = float(self.lhs), float(self.rhs), float(self.slack_used)
        if not self.applicable:
            self.passed = True
        elif self.kind == LE:
            self.passed = self.lhs <= self.rhs + self.slack_used
        elif self.kind == GE:
            self.passed = self.lhs >= self.rhs - self.slack_used
        elif self.kind == EQ:
            self.passed = abs(self.lhs - self.rhs) <= self.slack_used
        else:
            raise ValueError(f"unknown check kind {self.kind!r}")

    def as_dict(self):
        return {
            "check_name": self.check_name,
            "passed": self.passed,
            "applicable": self.applicable,
            "kind": self.kind,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack_used": self.slack_used,
            "context": self.context,
        }


def _sem(v):
    v = np.asarray(v, dtype=float)
    return float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


def _raw(cfg):
    return replace(cfg or MeasureConfig(), apply_unit_normalization=False, apply_optimal_scaling=False)


# Identities -----------------------------------------------------------------


def check_completeness(model, x, x0=None):
    """``sum(phi* * I) == f(x) - f(x - I)`` for the deterministic ``I = x - x0``."""
    x = as_vector(x, "x")
    family = BaselineDiff(x0)
    I = family.sample(x, 1).i_vecs[0]
    lam = COMPLETENESS_RIDGE * float(I @ I) / x.size
    phi = explain_optimal(model, x, family, lam=lam).values if lam > 0 else np.zeros_like(x)
    lhs = float(np.dot(phi, I))
    rhs = float(model.evaluate(x) - model.evaluate(x - I))
    return CheckResult("completeness", lhs, rhs, 1e-6, EQ, context={"x": x.tolist()})


def check_gradient_limit(model, x, epsilons=(1e-1, 1e-2, 1e-3), n=20000, rng=None, tol=1e-3):
    """Optimal explanation under ``epsilon * e_i`` perturbations approaches the gradient.

    Passes if the sup-norm error at the smallest ``epsilon`` is below ``tol``
    and the errors decrease along ``epsilons``.
    """
    x = as_vector(x, "x")
    stream = as_stream(rng)
    grad = model.gradient(x)
    errors = [float(np.max(np.abs(explain_optimal(model, x, CoordinateEps(e), n, rng=stream.child(k)).values - grad)))
              for k, e in enumerate(epsilons)]
    monotone = all(a > b for a, b in zip(errors, errors[1:]))
    return CheckResult("gradient_limit", errors[-1], tol if monotone else -math.inf, 0.0, LE,
                       context={"errors": errors, "epsilons": list(epsilons), "monotone": monotone})


def check_occlusion_equivalence(model, x, n=2000, rng=None):
    """Masked optimal explanation with singleton masks equals occlusion-1."""
    x = as_vector(x, "x")
    occ = Occlusion1Explainer().explain(model, x).values
    opt = MaskedOptimalExplainer(CoordinateTimesX(), n, stream=as_stream(rng)).explain(model, x).values
    return CheckResult("occlusion_equivalence", float(np.max(np.abs(opt - occ))), 0.0, 1e-6, EQ,
                       context={"x": x.tolist()})


def check_shapley_equivalence(model, x, n=20000, rng=None, rel_tol=0.02):
    """Masked optimal explanation under the Shapley kernel against enumeration."""
    x = as_vector(x, "x")
    exact = ShapleyExplainer().explain(model, x).values
    est = MaskedOptimalExplainer(ShapleyKernel(), n, stream=as_stream(rng)).explain(model, x).values
    scale = float(np.max(np.abs(exact)))
    return CheckResult("shapley_equivalence", float(np.max(np.abs(est - exact))), 0.0, rel_tol * scale, EQ,
                       context={"x": x.tolist(), "scale": scale})


def check_sample_optimality(model, x, family, explainers, n_infd=1000, rng=None):
    """Optimal explanation has the smallest residual sum on a shared sample set.

    The optimal solve and every competitor are scored on the same recorded
    perturbations with scaling off. The optimal explanation is fitted with a
    tiny ridge, so the comparison allows a relative slack of ``1e-9``.
    """
    x = as_vector(x, "x")
    cfg = MeasureConfig(n_infd=n_infd, apply_optimal_scaling=False)
    samples = family.sample(x, n_infd, as_stream(rng))
    I = samples.i_vecs
    df = model.evaluate(x) - model.evaluate(x - I)
    phi = solve_regularized(I.T @ I / len(I), I.T @ df / len(I))
    opt = infidelity(model, phi, x, family, cfg, samples=samples)
    others = {}
    for name, ex in explainers.items():
        attr = ex.explain(model, x)
        if attr.locality == GLOBAL:
            continue
        others[name] = infidelity(model, attr, x, family, cfg, samples=samples)
    best_other = min(others.values())
    return CheckResult("sample_optimality", opt, best_other, 1e-9 * max(1.0, best_other), LE,
                       context={"others": others})


# Inequalities -------------------------------------------------------------


def check_smoothing_sensitivity(model, explainer, kernel, x, cfg=None, n_kernel=50, rng=None):
    """Smoothed max-sensitivity against the kernel average of the base one.

    Attributions are compared unnormalised; the smoothed explainer and the
    right-hand side use the same kernel points and ball offsets.
    """
    cfg = _raw(cfg)
    x = as_vector(x, "x")
    stream = as_stream(rng)
    smoothed = SmoothedExplainer(explainer, kernel, n_kernel, stream.child(1))
    offsets = smoothed.offsets(x.size)
    deltas = ball_offsets(cfg, x.size, stream.child(2))
    lhs = sens_max(smoothed, model, x, cfg, deltas=deltas)
    per_z = np.array([sens_max(explainer, model, x + o, cfg, deltas=deltas) for o in offsets])
    rhs = per_z.mean()
    # equality holds when the attribution shift is the same at every z
    slack = 3 * _sem(per_z) + _ROUNDING * max(1.0, abs(rhs))
    return CheckResult("smoothing_sensitivity", lhs, rhs, slack, LE,
                       context={"x": x.tolist(), "kernel": str(kernel)})


def check_smoothing_infidelity(model, explainer, kernel, family, x, n=1000, rng=None, n_kernel=50):
    """Infidelity of the smoothed explainer against ``C2/(1 - 2 sqrt(C1))`` times the base.

    The constants are measured at ``x`` on a grid of ``n`` perturbations by
    ``n_kernel`` kernel points, and the smoothed explanation is the average
    over the same kernel points. The bound is only informative for
    ``C1 < 1/4``; otherwise the result is marked not applicable.
    """
    x = as_vector(x, "x")
    t = smoothing_terms(model, explainer, x, family, kernel, n, rng, n_kernel)
    ctx = {"x": x.tolist(), "kernel": str(kernel), "c1": t.c1, "c2": t.c2,
           "c2_se": t.c2_se, "base_infidelity": t.base_infd}
    if math.isnan(t.c1):
        # base residual vanishes, so the smoothed one must too
        return CheckResult("smoothing_infidelity", t.smoothed_infd, 0.0, _ROUNDING * max(1.0, t.den), LE,
                           context=ctx)
    if not t.c1 < C1_LIMIT:
        return CheckResult("smoothing_infidelity", t.smoothed_infd, math.nan, 0.0, LE,
                           applicable=False, context=ctx)
    factor = t.c2 / (1 - 2 * math.sqrt(t.c1))
    ctx["constant"] = factor
    slack = 3 * math.hypot(t.smoothed_infd_se, factor * t.base_infd_se)
    return CheckResult("smoothing_infidelity", t.smoothed_infd, factor * t.base_infd, slack, LE, context=ctx)


def check_softplus_bound(model, cfg=None, x=None, rng=None):
    """Raw-gradient max-sensitivity against ``prod(||W_i||^2 / 4) * r``.

    The ball is Euclidean, matching the spectral norms in the bound. Raises if the model is not a zero-bias softplus network.
    """
    cfg = replace(_raw(cfg), ball_norm="l2")
    rhs = softplus_sensitivity_bound(model, cfg.radius_r)
    stream = as_stream(rng)
    x = stream.normal(size=model.input_dim) if x is None else as_vector(x, "x")
    lhs = sens_max(GradientExplainer(), model, x, cfg, stream)
    return CheckResult("softplus_bound", lhs, rhs, 1e-12, LE, context={"x": np.asarray(x).tolist()})


def check_hessian_bounds(model, family, cfg=None, x=None, rng=None):
    """Gradient infidelity and sensitivity bounds from a Hessian norm bound ``L``.

    Returns two results: unscaled infidelity against ``E||I||^4 L^2 / 2`` on
    the same perturbations, and raw max-sensitivity over the Euclidean ball
    against ``L r``.
    """
    if not isinstance(model, QuadraticModel):
        raise TypeError("the Hessian bounds are checked on QuadraticModel instances")
    cfg = replace(_raw(cfg), ball_norm="l2")
    stream = as_stream(rng)
    x = stream.normal(size=model.input_dim) if x is None else as_vector(x, "x")
    L = hessian_norm_bound(model, x, cfg.radius_r, 0, stream)
    samples = family.sample(x, cfg.n_infd, stream.child(1))
    grad = GradientExplainer().explain(model, x)
    rho, df = infidelity_residuals(model, grad, x, samples)
    sq = (rho - df) ** 2
    quart = np.sum(samples.i_vecs ** 2, axis=1) ** 2 * L ** 2 / 2
    ctx = {"x": np.asarray(x).tolist(), "L": L}
    infd = CheckResult("hessian_infidelity", sq.mean(), quart.mean(), 3 * _sem(sq), LE, context=ctx)
    sens = sens_max(GradientExplainer(), model, x, cfg, stream.child(2))
    return infd, CheckResult("hessian_sensitivity", sens, L * cfg.radius_r, 1e-12, LE, context=ctx)


def check_rinfd_lower_bound(model, explainer, x, family, cfg=None, n_outer=20, rng=None):
    """Robust infidelity against ``max(0, (A - B1 - B2) / 2)^2``.

    With ``u`` ranging over the shared candidate set (``u = 0`` included) and
    ``I`` over the shared perturbations drawn at ``x``::

        A  = max_u mean |I^T (phi(x + u) - phi(x))|
        B1 = max_u |f(x + u) - f(x)|
        B2 = max_u mean |f(x + u - I) - f(x - I)|
    """
    cfg = replace(cfg or MeasureConfig(), apply_optimal_scaling=False)
    x = as_vector(x, "x")
    lhs, values, U, samples = robust_infidelity(model, explainer, x, family, cfg, n_outer, rng,
                                                return_details=True)
    phi0 = explainer.explain(model, x)
    P = samples.masks if phi0.locality == GLOBAL else samples.i_vecs
    f_x, f_xI = model.evaluate(x), model.evaluate(x - samples.i_vecs)
    A = B1 = B2 = 0.0
    for u in U:
        phi_u = explainer.explain(model, x + u)
        A = max(A, float(np.mean(np.abs(P @ (phi_u.values - phi0.values)))))
        B1 = max(B1, abs(float(model.evaluate(x + u) - f_x)))
        B2 = max(B2, float(np.mean(np.abs(model.evaluate(x + u - samples.i_vecs) - f_xI))))
    rhs = max(0.0, (A - B1 - B2) / 2) ** 2
    ctx = {"x": x.tolist(), "A": A, "B1": B1, "B2": B2, "infidelity_at_x": float(values[0])}
    return CheckResult("rinfd_lower_bound", lhs, rhs, 0.0, GE, context=ctx)


def logistic_loss(f, y):
    """``log(1 + e^f) - y f``, the logistic loss of score ``f`` for label ``y`` in {0, 1}."""
    return np.logaddexp(0.0, f) - y * f


def check_adversarial_bound(model, x, y, epsilon, n_probe=200, rng=None):
    """Worst logistic loss in the L-infinity ball against its second-order bound.

    The right-hand side is ``loss(f(x)) + eps ||grad f(x)||_1 + eps^2 / 2 * L``
    with ``L`` bounding ``|v^T H v|`` over ``||v||_inf <= 1``. The probe set
    holds random box points, random vertices and the two vertices aligned
    with the gradient sign, which attain the inner maximum for linear ``f``.
    """
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = as_vector(x, "x")
    stream = as_stream(rng)
    g = model.gradient(x)
    s = np.sign(g)
    vertices = epsilon * np.where(stream.uniform(size=(n_probe, x.size)) < 0.5, -1.0, 1.0)
    probes = np.vstack([np.zeros((1, x.size)), epsilon * s, -epsilon * s, vertices,
                        sample_uniform_box(stream, np.zeros(x.size), epsilon, size=n_probe)])
    lhs = float(np.max(logistic_loss(model.evaluate(x + probes), y)))
    L = hessian_norm_bound(model, x, epsilon, n_probe, stream.child(1), norm="inf_to_one")
    first = float(logistic_loss(model.evaluate(x), y))
    rhs = first + epsilon * float(np.sum(np.abs(g))) + epsilon ** 2 / 2 * L
    return CheckResult("adversarial_bound", lhs, rhs, 1e-8, LE,
                       context={"x": x.tolist(), "y": y, "epsilon": epsilon, "loss_at_x": first})


# Sanity check ---------------------------------------------------------------


def run_sanity_check(model, inputs, explainers, rng=None, randomized=None):
    """Rank correlation between attributions before and after randomising the last layer.

    Parameters
    ----------
    model : MlpModel
    inputs : array_like, shape (n, d)
    explainers : dict
        Method name to explainer.
    rng : RngStream or int, optional
        Draws the new last-layer weights.
    randomized : BlackBoxModel, optional
        Use this model instead of a fresh randomisation.

    Returns
    -------
    list of (name, mean_corr, mean_abs_corr)
    """
    if not isinstance(model, MlpModel):
        raise TypeError("the sanity check randomises an MlpModel layer")
    if randomized is None:
        randomized = randomize_layer(model, len(model.layers) - 1, as_stream(rng))
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    rows = []
    for name, ex in explainers.items():
        a, b = ex.explain_batch(model, X), ex.explain_batch(randomized, X)
        corr = [spearman_correlation(u, v) for u, v in zip(a, b)]
        corr_abs = [spearman_correlation(np.abs(u), np.abs(v)) for u, v in zip(a, b)]
        rows.append((name, float(np.mean(corr)), float(np.mean(corr_abs))))
    return rows


# Corpus and suites ----------------------------------------------------------


def softplus_corpus_model(stream, max_dim=10, max_layers=3):
    d = int(stream.integers(2, max_dim + 1))
    widths = [int(stream.integers(2, 9)) for _ in range(int(stream.integers(0, max_layers)))]
    return random_mlp(stream, [d] + widths + [1], "softplus")


def bumpy_mlp(stream, d=6, hidden=48, scale=4.0):
    """Softplus network with steep, densely packed units and a linear readout.

    Its gradient varies quickly at the scale of a few hundredths, which is the
    regime where kernel smoothing matters.
    """
    W1 = scale * stream.normal(size=(hidden, d))
    b1 = scale * stream.normal(size=hidden)
    W2 = stream.normal(size=(1, hidden)) / math.sqrt(hidden)
    return MlpModel([Layer(W1, b1, "softplus"), Layer(W2, np.zeros(1), "identity")])


def random_quadratic(stream, d=None, scale=1.0):
    d = int(stream.integers(2, 7)) if d is None else d
    G = stream.normal(size=(d, d))
    return QuadraticModel(scale * (G + G.T) / 2, stream.normal(size=d), float(stream.normal()))


def _jobs_completeness(n):
    def complete(s):
        m = softplus_corpus_model(s)
        return [check_completeness(m, 2 * s.normal(size=m.input_dim))]

    def props(s):
        m = softplus_corpus_model(s, max_dim=8)
        x = s.normal(size=m.input_dim)
        x[np.abs(x) < 0.1] += 0.5
        explainers = {"grad": GradientExplainer(), "ig": IntegratedGradientsExplainer(),
                      "occlusion-local": _LocalOcclusion()}
        return [
            check_gradient_limit(m, x, rng=s.child(1)),
            check_occlusion_equivalence(m, x, rng=s.child(2)),
            check_shapley_equivalence(m, x, rng=s.child(3)),
            check_sample_optimality(m, x, NoisyBaseline(sigma=0.5), explainers, rng=s.child(4)),
        ]

    return [complete] * n + [props] * n


class _LocalOcclusion(Occlusion1Explainer):
    """Occlusion divided by ``x``, the local form that pairs with real perturbations."""

    locality = "local"
    tag = "occlusion-local"

    def explain_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.nan_to_num(super().explain_batch(model, X) / X)


def _jobs_smoothing(n):
    kernels = [GaussianKernel(0.1), UniformBoxKernel(0.2), GaussianKernel(0.5)]
    cfg = MeasureConfig()

    def sens(k):
        def job(s):
            m = softplus_corpus_model(s, max_dim=6) if s.integers(0, 2) else random_quadratic(s)
            return [check_smoothing_sensitivity(m, GradientExplainer(), kernels[k], s.normal(size=m.input_dim),
                                                cfg, rng=s.child(1))]
        return job

    def toy(s):
        return [check_smoothing_sensitivity(ToyFunction(), GradientExplainer(), UniformBoxKernel(2.0),
                                            np.array([20.0, 11.9]), cfg, rng=s)]

    def infd(s):
        m = random_quadratic(s, d=4, scale=0.5)
        x = s.normal(size=4)
        return [check_smoothing_infidelity(m, GradientExplainer(), GaussianKernel(0.1), NoisyBaseline(sigma=0.5),
                                           x, n=1000, rng=s.child(1))]

    return [sens(k) for k in range(3) for _ in range(n)] + [toy] + [infd] * n


def _jobs_bounds(n):
    cfg = MeasureConfig(n_sens=500)

    def softplus(s):
        d = int(s.integers(2, 7))
        m = random_mlp(s, [d, int(s.integers(2, 7)), 1], "softplus")
        return [check_softplus_bound(m, cfg, rng=s.child(1))]

    def hessian(s):
        m = random_quadratic(s)
        return list(check_hessian_bounds(m, NoisyBaseline(sigma=1.0), MeasureConfig(n_infd=10000, n_sens=500),
                                         rng=s.child(1)))

    return [softplus] * n + [hessian] * n


def _jobs_rinfd(n):
    cfg = MeasureConfig(n_infd=1000)

    def toy(s):
        return [check_rinfd_lower_bound(ToyFunction(), GradientExplainer(), np.array([20.0, 11.95]),
                                        BaselineDiff(np.array([10.5, 0.0])), cfg, 50, s)]

    def model(s):
        m = softplus_corpus_model(s, max_dim=6) if s.integers(0, 2) else random_quadratic(s)
        ex = GradientExplainer() if s.integers(0, 2) else IntegratedGradientsExplainer(steps=32)
        return [check_rinfd_lower_bound(m, ex, s.normal(size=m.input_dim), NoisyBaseline(sigma=0.5),
                                        cfg, 20, s.child(1))]

    return [toy] + [model] * (n - 1)


def _jobs_adversarial(n):
    def linear(s):
        d = int(s.integers(2, 7))
        m = linear_model(s.normal(size=d), float(s.normal()))
        return [check_adversarial_bound(m, s.normal(size=d), int(s.integers(0, 2)), 0.1, 50, s.child(1))]

    def quadratic(s):
        m = random_quadratic(s)
        return [check_adversarial_bound(m, s.normal(size=m.input_dim), int(s.integers(0, 2)), 0.1, 200,
                                        s.child(1))]

    return [linear] * 5 + [quadratic] * n


SUITES = {
    "completeness": (1, _jobs_completeness),
    "smoothing": (2, _jobs_smoothing),
    "bounds": (3, _jobs_bounds),
    "rinfd": (4, _jobs_rinfd),
    "adversarial": (5, _jobs_adversarial),
}


def worker_count(threads=None):
    """Worker count from the argument or ``XINFID_THREADS``; 0 means one per CPU."""
    if threads is None:
        threads = int(os.environ.get("XINFID_THREADS", "0") or 0)
    if threads < 0:
        raise ValueError("thread count must be non-negative")
    return threads or (os.cpu_count() or 1)


def run_suite(suite="all", seed=0, threads=None, n_models=20):
    """Run a named suite over a generated corpus; results come back in job order.

    Job ``k`` of a suite draws from the stream keyed by ``(seed, suite id, k)``,
    so results do not depend on the worker count.
    """
    names = list(SUITES) if suite == "all" else [suite]
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {suite!r}; choose from all, {', '.join(SUITES)}")
    tasks = []
    for name in names:
        sid, build = SUITES[name]
        tasks += [(job, RngStream(seed, (sid, k)), name) for k, job in enumerate(build(n_models))]

    def run(task):
        job, stream, name = task
        out = job(stream)
        for r in out:
            r.context = {"suite": name, "stream": list(stream.path), "seed": seed, **r.context}
        return out

    workers = worker_count(threads)
    if workers == 1:
        batches = [run(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(run, tasks))
    return [r for batch in batches for r in batch]
