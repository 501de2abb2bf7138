"""Monte Carlo estimators for explanation infidelity and sensitivity.

All estimators take an optional ``rng`` (an :class:`~xinfid.numerics.RngStream`,
an integer seed or ``None``). Passing the same stream state reproduces the
same sample set, which is how two explanations are compared on shared samples.
"""
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .explainers import GLOBAL, LOCAL, Attribution
from .numerics import RngStream, as_stream, as_vector, sample_l2_ball, sample_uniform_box

__all__ = [
    "DegenerateEstimateError",
    "InfidelityEstimate",
    "MeasureConfig",
    "MeasureReport",
    "SmoothingTerms",
    "ball_offsets",
    "estimate_C1",
    "estimate_C2",
    "evaluate_measures",
    "infidelity",
    "infidelity_residuals",
    "optimal_scale",
    "robust_infidelity",
    "sens_grad",
    "sens_lips",
    "sens_max",
    "smoothing_terms",
    "unit_normalize",
]

# stream ids for the sample sets drawn by evaluate_measures
STREAM_INFD, STREAM_SENS, STREAM_RINFD = 1, 2, 3
_SCALE_GUARD = 1e-12
_CHUNK = 1 << 20
# squared relative rounding level below which a residual counts as zero
_DEGENERATE_REL = 1e-24


class DegenerateEstimateError(ArithmeticError):
    """A ratio estimate has a zero denominator."""


@dataclass(frozen=True)
class MeasureConfig:
    """Budgets and switches shared by the estimators.

    Parameters
    ----------
    n_infd, n_sens : int
        Sample counts for infidelity and for the sensitivity ball.
    radius_r : float
        Sensitivity ball radius.
    ball_norm : {"inf", "l2"}
        Norm defining the sensitivity ball. Attribution differences are
        always measured in L2.
    apply_optimal_scaling : bool
        Rescale the attribution by the least-squares factor before computing
        infidelity.
    apply_unit_normalization : bool
        L2-normalise attributions before differencing in the sensitivities.
    seed : int
    """

    n_infd: int = 1000
    n_sens: int = 50
    radius_r: float = 0.1
    ball_norm: str = "inf"
    apply_optimal_scaling: bool = True
    apply_unit_normalization: bool = True
    seed: int = 0

    diff_norm = "l2"

    def __post_init__(self):
        if self.n_infd < 1 or self.n_sens < 1:
            raise ValueError("sample counts must be >= 1")
        if self.radius_r < 0:
            raise ValueError(f"radius_r must be non-negative, got {self.radius_r}")
        if self.ball_norm not in ("inf", "l2"):
            raise ValueError(f"ball_norm must be 'inf' or 'l2', got {self.ball_norm!r}")


class InfidelityEstimate(NamedTuple):
    value: float
    stderr: float
    alpha: float
    n: int


@dataclass
class MeasureReport:
    method_tag: str
    infidelity: float
    sens_max: float
    scaling_alpha: float
    infidelity_se: float
    n_infd: int
    n_sens: int
    seed: int
    sens_grad: Optional[float] = None
    sens_lips: Optional[float] = None
    rinfd: Optional[float] = None
    zero_attribution: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("infidelity", "sens_max", "sens_grad", "sens_lips", "rinfd", "infidelity_se"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if not math.isfinite(self.scaling_alpha):
            raise ValueError("scaling_alpha must be finite")

    def as_dict(self):
        out = {k: getattr(self, k) for k in (
            "method_tag", "infidelity", "infidelity_se", "sens_max", "sens_grad", "sens_lips",
            "rinfd", "scaling_alpha", "zero_attribution", "n_infd", "n_sens", "seed")}
        out.update(self.extra)
        return out


def optimal_scale(rho, delta_f):
    """Least-squares factor ``alpha`` minimising ``sum((alpha*rho - delta_f)**2)``.

    Returns 1 when ``sum(rho**2) < 1e-12``.
    """
    rho = np.asarray(rho, dtype=float).ravel()
    delta_f = np.asarray(delta_f, dtype=float).ravel()
    if rho.shape != delta_f.shape:
        raise ValueError(f"length mismatch: {rho.size} vs {delta_f.size}")
    denom = float(np.dot(rho, rho))
    if denom < _SCALE_GUARD:
        return 1.0
    return float(np.dot(rho, delta_f)) / denom


def ball_offsets(cfg, d, rng, n=None, radius=None):
    """``n`` offsets (default ``cfg.n_sens``) uniform in the sensitivity ball."""
    n = cfg.n_sens if n is None else n
    radius = cfg.radius_r if radius is None else radius
    sampler = sample_uniform_box if cfg.ball_norm == "inf" else sample_l2_ball
    return sampler(rng, np.zeros(d), radius, size=n)


def _values_and_locality(attr):
    if isinstance(attr, Attribution):
        return attr.values, attr.locality
    return as_vector(attr, "attribution"), LOCAL


def infidelity_residuals(model, attr, x, batch, center=None):
    """Projections ``rho`` and function differences ``delta_f`` on a sample batch.

    Local attributions use ``rho = I^T phi``; global attributions use the mask
    form ``rho = z^T phi``. ``center`` (default ``x``) is the point at which
    the differences ``f(center) - f(center - I)`` are taken.
    """
    values, locality = _values_and_locality(attr)
    center = as_vector(x if center is None else center, "center")
    if locality == GLOBAL:
        if batch.masks is None:
            raise ValueError("a global attribution needs a mask-structured perturbation family")
        rho = batch.masks @ values
    else:
        rho = batch.i_vecs @ values
    delta_f = model.evaluate(center) - model.evaluate(center - batch.i_vecs)
    return rho, delta_f


def _check_locality(attr, family):
    _, locality = _values_and_locality(attr)
    if locality == GLOBAL and not family.masked:
        raise ValueError(
            f"global attribution cannot be scored with {type(family).__name__}: "
            "it has no mask structure; use a local method or a mask family")


def _squared_residual_stats(rho, delta_f, scale):
    alpha = optimal_scale(rho, delta_f) if scale else 1.0
    sq = (alpha * rho - delta_f) ** 2
    n = sq.size
    se = float(np.std(sq, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return InfidelityEstimate(float(np.mean(sq)), se, alpha, n)


def infidelity(model, attr, x, family, cfg=None, rng=None, samples=None, return_details=False):
    """Mean squared gap between ``I^T phi`` and ``f(x) - f(x - I)``.

    Parameters
    ----------
    model : BlackBoxModel
    attr : Attribution or array_like
        A bare array is treated as a local attribution.
    x : array_like
    family : PerturbationFamily
    cfg : MeasureConfig, optional
    rng : RngStream or int, optional
        Source of the ``cfg.n_infd`` perturbations; ignored if ``samples`` is
        given.
    samples : PerturbationBatch, optional
        Pre-drawn perturbations, for comparing several attributions on one
        sample set.
    return_details : bool
        Return an :class:`InfidelityEstimate` instead of the bare value.
    """
    cfg = cfg or MeasureConfig()
    x = as_vector(x, "x")
    _check_locality(attr, family)
    if samples is None:
        samples = family.sample(x, cfg.n_infd, as_stream(rng, STREAM_INFD))
    rho, delta_f = infidelity_residuals(model, attr, x, samples)
    est = _squared_residual_stats(rho, delta_f, cfg.apply_optimal_scaling)
    return est if return_details else est.value


def unit_normalize(V):
    """Row-wise L2 normalisation; zero rows are left as they are."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    return np.where(norms > 0, V / np.where(norms > 0, norms, 1.0), V)


def _attribution_shift(explainer, model, x, deltas, normalize):
    P = np.vstack([x[None, :], x[None, :] + deltas])
    V = explainer.explain_batch(model, P)
    if normalize:
        V = unit_normalize(V)
    return np.linalg.norm(V[1:] - V[0], axis=1)


def _deltas(cfg, x, rng, deltas):
    if deltas is not None:
        return np.atleast_2d(np.asarray(deltas, dtype=float))
    return ball_offsets(cfg, x.size, as_stream(rng, STREAM_SENS))


def sens_max(explainer, model, x, cfg=None, rng=None, deltas=None):
    """Largest attribution change over ``cfg.n_sens`` points of the ball.

    ``deltas`` overrides the sampled offsets so that several estimates can
    share one candidate set.
    """
    cfg = cfg or MeasureConfig()
    x = as_vector(x, "x")
    D = _deltas(cfg, x, rng, deltas)
    if cfg.radius_r == 0 and deltas is None:
        return 0.0
    return float(np.max(_attribution_shift(explainer, model, x, D, cfg.apply_unit_normalization)))


def sens_lips(explainer, model, x, cfg=None, rng=None, deltas=None):
    """Largest ratio ``||phi(x + delta) - phi(x)|| / ||delta||_2`` over sampled offsets."""
    cfg = cfg or MeasureConfig()
    x = as_vector(x, "x")
    D = _deltas(cfg, x, rng, deltas)
    size = np.linalg.norm(D, axis=1)
    D = D[size > 0]
    if D.shape[0] == 0:
        return 0.0
    shift = _attribution_shift(explainer, model, x, D, cfg.apply_unit_normalization)
    return float(np.max(shift / size[size > 0]))


def sens_grad(explainer, model, x, cfg=None, rng=None, deltas=None, step=1e-4):
    """Largest Frobenius norm of the attribution Jacobian at sampled ball points.

    The Jacobian is taken by central differences with step
    ``step * max(1, |y_j|)``; attributions are not normalised.
    """
    cfg = cfg or MeasureConfig()
    x = as_vector(x, "x")
    Y = x + _deltas(cfg, x, rng, deltas)
    n, d = Y.shape
    h = step * np.maximum(1.0, np.abs(Y))
    E = np.eye(d)
    plus = (Y[:, None, :] + h[:, :, None] * E[None]).reshape(-1, d)
    minus = (Y[:, None, :] - h[:, :, None] * E[None]).reshape(-1, d)
    V = explainer.explain_batch(model, np.vstack([plus, minus]))
    J = (V[: n * d] - V[n * d:]).reshape(n, d, d) / (2 * h[:, :, None])
    return float(np.max(np.linalg.norm(J, axis=(1, 2))))


def robust_infidelity(model, explainer, x, family, cfg=None, n_outer=20, rng=None,
                      candidates=None, return_details=False):
    """Worst infidelity over shifted inputs ``x + u`` with ``u`` in the ball.

    The candidate set always contains ``u = 0``. The attribution is recomputed
    at every ``x + u`` while the perturbations ``I`` are drawn once at ``x``
    and shared by all candidates.

    Returns the maximum, or ``(maximum, per_candidate_values, candidates,
    samples)`` with ``return_details``.
    """
    cfg = cfg or MeasureConfig()
    if n_outer < 1:
        raise ValueError("n_outer must be >= 1")
    x = as_vector(x, "x")
    stream = as_stream(rng, STREAM_RINFD)
    samples = family.sample(x, cfg.n_infd, stream)
    if candidates is None:
        U = np.vstack([np.zeros((1, x.size)), ball_offsets(cfg, x.size, stream, n_outer - 1)])
    else:
        U = np.atleast_2d(np.asarray(candidates, dtype=float))
    values = np.empty(U.shape[0])
    for k, u in enumerate(U):
        attr = explainer.explain(model, x + u)
        _check_locality(attr, family)
        rho, delta_f = infidelity_residuals(model, attr, x, samples, center=x + u)
        values[k] = _squared_residual_stats(rho, delta_f, cfg.apply_optimal_scaling).value
    best = float(values.max())
    return (best, values, U, samples) if return_details else best


class SmoothingTerms(NamedTuple):
    """Grid estimates behind the smoothing-infidelity bound at one input.

    ``c1_num`` and ``c2_num`` are the numerators of the two constants and
    ``den`` their shared denominator; ``base_infd`` is the kernel average of
    the base explanation's infidelity and ``smoothed_infd`` the infidelity of
    the grid-averaged explanation at ``x``.
    """

    c1: float
    c2: float
    c1_se: float
    c2_se: float
    c1_num: float
    c2_num: float
    den: float
    base_infd: float
    base_infd_se: float
    smoothed_infd: float
    smoothed_infd_se: float


def _ratio_se(a, b):
    """Standard error of ``mean(a) / mean(b)`` by the delta method."""
    n = a.size
    if n < 2 or b.mean() == 0:
        return 0.0
    r = a.mean() / b.mean()
    return float(np.std(a - r * b, ddof=1) / math.sqrt(n) / b.mean())


def smoothing_terms(model, explainer, x, family, kernel, n, rng=None, n_kernel=50, offsets=None):
    """Nested Monte Carlo grid of ``n`` perturbations by ``n_kernel`` kernel points.

    The perturbations ``I`` are drawn at ``x`` and the kernel points
    ``z = x + offset`` are shared by every ``I``. ``offsets`` overrides the
    kernel draws, e.g. to reuse those of a :class:`SmoothedExplainer`.
    """
    if n < 1 or n_kernel < 1:
        raise ValueError("n and n_kernel must be >= 1")
    x = as_vector(x, "x")
    d = x.size
    stream = as_stream(rng, 0)
    I = family.sample(x, n, stream.child(1)).i_vecs
    if offsets is None:
        offsets = kernel.offsets(stream.child(2), d, n_kernel)
    offsets = np.atleast_2d(offsets)
    if not np.any(offsets):
        offsets = offsets[:1]
    Z = x + offsets
    Phi = explainer.explain_batch(model, Z)
    dx = model.evaluate(x) - model.evaluate(x - I)
    fZ = model.evaluate(Z)
    rows = {key: np.empty(len(I)) for key in ("c1", "den", "c2", "base")}
    step = max(1, _CHUNK // len(Z))
    for lo in range(0, len(I), step):
        Ic, dxc = I[lo:lo + step], dx[lo:lo + step]
        fZI = model.evaluate((Z[None, :, :] - Ic[:, None, :]).reshape(-1, d)).reshape(len(Ic), len(Z))
        dz = fZ[None, :] - fZI
        proj = Ic @ Phi.T
        R = proj - dxc[:, None]
        rows["c1"][lo:lo + step] = ((dz - dxc[:, None]) ** 2).mean(axis=1)
        rows["den"][lo:lo + step] = (R ** 2).mean(axis=1)
        rows["c2"][lo:lo + step] = R.mean(axis=1) ** 2
        rows["base"][lo:lo + step] = ((proj - dz) ** 2).mean(axis=1)
    c1_rows, den_rows, c2_rows, base_rows = rows["c1"], rows["den"], rows["c2"], rows["base"]
    den = float(den_rows.mean())
    # a residual at rounding level of f is an exact fit in disguise
    if den <= _DEGENERATE_REL * float(np.mean(dx ** 2) + np.mean(fZ ** 2)):
        c1 = c2 = math.nan
    else:
        c1 = float(c1_rows.mean()) / den
        c2 = float(c2_rows.mean()) / den
    sq_smoothed = (I @ Phi.mean(axis=0) - dx) ** 2
    sem = (lambda v: float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0)
    return SmoothingTerms(
        c1, c2, _ratio_se(c1_rows, den_rows), _ratio_se(c2_rows, den_rows),
        float(c1_rows.mean()), float(c2_rows.mean()), den,
        float(base_rows.mean()), sem(base_rows),
        float(sq_smoothed.mean()), sem(sq_smoothed),
    )


def _constant(terms, which):
    if math.isnan(terms.c1):
        raise DegenerateEstimateError(
            "residual I^T phi(z) - (f(x) - f(x - I)) vanishes on every sample; the ratio is undefined")
    return terms.c1 if which == 1 else terms.c2


def estimate_C1(model, explainer, x, family, kernel, n, rng=None, n_kernel=1000):
    """Ratio of the kernel variation of ``f(z) - f(z - I)`` to the smoothed residual.

    A per-input value; take the maximum over a test set for the global
    constant. The kernel grid is shared by all perturbations, so its size
    ``n_kernel`` rather than ``n`` controls the seed-to-seed spread.
    """
    return _constant(smoothing_terms(model, explainer, x, family, kernel, n, rng, n_kernel), 1)


def estimate_C2(model, explainer, x, family, kernel, n, rng=None, n_kernel=1000):
    """Ratio of the squared kernel-averaged residual to the averaged squared residual.

    At most 1 on every sample grid by Jensen's inequality.
    """
    return _constant(smoothing_terms(model, explainer, x, family, kernel, n, rng, n_kernel), 2)


def evaluate_measures(model, explainer, x, family, cfg=None, input_index=0,
                      with_sens_grad=False, with_sens_lips=False, rinfd_outer=0):
    """All measures for one ``(input, explainer)`` pair.

    Sample sets are keyed by ``(cfg.seed, purpose, input_index)`` only, so
    every explainer evaluated at the same input sees identical perturbations
    and ball points.
    """
    cfg = cfg or MeasureConfig()
    x = as_vector(x, "x")
    attr = explainer.explain(model, x)
    infd = infidelity(model, attr, x, family, cfg, RngStream(cfg.seed, (STREAM_INFD, input_index)),
                      return_details=True)
    deltas = ball_offsets(cfg, x.size, RngStream(cfg.seed, (STREAM_SENS, input_index)))
    report = MeasureReport(
        method_tag=attr.method_tag,
        infidelity=infd.value,
        sens_max=sens_max(explainer, model, x, cfg, deltas=deltas),
        scaling_alpha=infd.alpha,
        infidelity_se=infd.stderr,
        n_infd=cfg.n_infd,
        n_sens=cfg.n_sens,
        seed=cfg.seed,
        zero_attribution=not np.any(attr.values),
    )
    if with_sens_grad:
        report.sens_grad = sens_grad(explainer, model, x, cfg, deltas=deltas)
    if with_sens_lips:
        report.sens_lips = sens_lips(explainer, model, x, cfg, deltas=deltas)
    if rinfd_outer:
        report.rinfd = robust_infidelity(model, explainer, x, family, cfg, rinfd_outer,
                                         RngStream(cfg.seed, (STREAM_RINFD, input_index)))
    return report
