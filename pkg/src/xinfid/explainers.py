"""Attribution methods.

Every explainer maps ``(model, x)`` to an :class:`Attribution`. Explainers are
immutable; the stochastic ones hold an :class:`~xinfid.numerics.RngStream` key
and restart it on every call, so the same input always receives the same
attribution and neighbouring inputs share their Monte Carlo noise.
"""
import abc
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import RngStream, as_vector, effective_ridge, sample_uniform_box, solve_regularized
from .perturbations import ShapleyKernel

__all__ = [
    "Attribution",
    "ConstantExplainer",
    "Explainer",
    "GaussianKernel",
    "GlobalExplainer",
    "GradientExplainer",
    "IntegratedGradientsExplainer",
    "MaskedOptimalExplainer",
    "Occlusion1Explainer",
    "OptimalExplainer",
    "ShapleyExplainer",
    "SmoothedExplainer",
    "SmoothingKernel",
    "UniformBoxKernel",
    "explain_gradient",
    "explain_integrated_gradients",
    "explain_occlusion1",
    "explain_optimal",
    "explain_optimal_masked",
    "explain_shapley_exact",
    "smooth",
    "to_global",
]

LOCAL, GLOBAL = "local", "global"
SHAPLEY_MAX_DIM = 20
_CHUNK = 1 << 16


@dataclass(frozen=True)
class Attribution:
    values: np.ndarray
    locality: str = LOCAL
    method_tag: str = ""
    baseline_used: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.locality not in (LOCAL, GLOBAL):
            raise ValueError(f"locality must be 'local' or 'global', got {self.locality!r}")
        object.__setattr__(self, "values", as_vector(self.values, "attribution"))


def _as_stream(rng, default_id):
    # a passed stream is restarted so every call sees the same draws
    if rng is None:
        return RngStream(0, (default_id,))
    if isinstance(rng, RngStream):
        return rng.fresh()
    return RngStream(int(rng), (default_id,))


def _gradients(model, P):
    if P.shape[0] <= _CHUNK:
        return model.gradient(P)
    return np.concatenate([model.gradient(P[i:i + _CHUNK]) for i in range(0, P.shape[0], _CHUNK)])


def _evaluations(model, P):
    if P.shape[0] <= _CHUNK:
        return model.evaluate(P)
    return np.concatenate([model.evaluate(P[i:i + _CHUNK]) for i in range(0, P.shape[0], _CHUNK)])


def _baseline_for(baseline, x):
    if baseline is None:
        return np.zeros_like(x)
    b = np.asarray(baseline, dtype=float)
    return np.full_like(x, float(b)) if b.ndim == 0 else as_vector(b, "baseline")


class Explainer(abc.ABC):
    locality = LOCAL
    tag = "explainer"

    @abc.abstractmethod
    def explain_batch(self, model, X):
        """Attribution values for each row of ``X``, shape ``(n, d)``."""

    def explain(self, model, x):
        x = as_vector(x, "x")
        values = self.explain_batch(model, x[None, :])[0]
        return Attribution(values, self.locality, self.tag, self._baseline_used(x))

    __call__ = explain

    def _baseline_used(self, x):
        return None


class ConstantExplainer(Explainer):
    """Ignores the model; returns a fixed vector."""

    def __init__(self, values, locality=LOCAL, tag="constant"):
        self.values = as_vector(values, "values")
        self.locality = locality
        self.tag = tag

    def explain_batch(self, model, X):
        X = np.atleast_2d(X)
        return np.broadcast_to(self.values, X.shape).copy()


class GradientExplainer(Explainer):
    tag = "grad"

    def explain_batch(self, model, X):
        return _gradients(model, np.atleast_2d(np.asarray(X, dtype=float)))


class IntegratedGradientsExplainer(Explainer):
    """Midpoint-rule path integral of the gradient from ``baseline`` to ``x``."""

    tag = "ig"

    def __init__(self, baseline=None, steps=128):
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.baseline = baseline
        self.steps = int(steps)

    def _baseline_used(self, x):
        return _baseline_for(self.baseline, x)

    def explain_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n, d = X.shape
        B = np.stack([_baseline_for(self.baseline, x) for x in X])
        t = (np.arange(self.steps) + 0.5) / self.steps
        out = np.empty_like(X)
        rows = max(1, _CHUNK // self.steps)
        for i in range(0, n, rows):
            Xc, Bc = X[i:i + rows], B[i:i + rows]
            P = Bc[:, None, :] + t[None, :, None] * (Xc - Bc)[:, None, :]
            G = _gradients(model, P.reshape(-1, d)).reshape(P.shape)
            out[i:i + rows] = G.mean(axis=1)
        return out


class Occlusion1Explainer(Explainer):
    """``f(x) - f(x with coordinate i set to its baseline value)``."""

    locality = GLOBAL
    tag = "occlusion"

    def __init__(self, baseline=None):
        self.baseline = baseline

    def _baseline_used(self, x):
        return _baseline_for(self.baseline, x)

    def explain_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty_like(X)
        for r, x in enumerate(X):
            b = _baseline_for(self.baseline, x)
            d = x.size
            P = np.repeat(x[None, :], d + 1, axis=0)
            P[np.arange(1, d + 1), np.arange(d)] = b
            fx = model.evaluate(P)
            out[r] = fx[0] - fx[1:]
        return out


class ShapleyExplainer(Explainer):
    """Exact Shapley values by enumerating all ``2^d`` coalitions.

    The value of coalition ``S`` is ``f`` at ``x`` with every coordinate outside
    ``S`` replaced by its baseline value.
    """

    locality = GLOBAL
    tag = "shapley"

    def __init__(self, baseline=None):
        self.baseline = baseline

    def _baseline_used(self, x):
        return _baseline_for(self.baseline, x)

    def explain_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([self._shapley(model, x) for x in X])

    def _shapley(self, model, x):
        d = x.size
        if d > SHAPLEY_MAX_DIM:
            raise ValueError(f"exact Shapley enumeration is limited to d <= {SHAPLEY_MAX_DIM}, got {d}")
        b = _baseline_for(self.baseline, x)
        codes = np.arange(1 << d)
        M = ((codes[:, None] >> np.arange(d)) & 1).astype(float)
        h = _evaluations(model, b + M * (x - b))
        size = M.sum(axis=1).astype(int)
        fact = [math.factorial(k) for k in range(d + 1)]
        weight = np.array([fact[s] * fact[d - s - 1] / fact[d] if s < d else 0.0 for s in range(d + 1)])
        phi = np.empty(d)
        for j in range(d):
            without = codes[(codes >> j) & 1 == 0]
            phi[j] = np.dot(weight[size[without]], h[without | (1 << j)] - h[without])
        return phi


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def offsets(self, rng, d, n):
        return self.sigma * rng.normal(size=(n, d))

    def __str__(self):
        return f"gaussian:sigma={self.sigma}"


@dataclass(frozen=True)
class UniformBoxKernel:
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")

    def offsets(self, rng, d, n):
        return sample_uniform_box(rng, np.zeros(d), self.radius, size=n)

    def __str__(self):
        return f"uniform:radius={self.radius}"


SmoothingKernel = (GaussianKernel, UniformBoxKernel)


class SmoothedExplainer(Explainer):
    """Monte Carlo average of a base explainer over kernel draws around ``x``.

    The ``n`` kernel offsets are fixed by ``stream``, so every input is
    smoothed with the same offsets.
    """

    def __init__(self, base, kernel, n=200, stream=None):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.base = base
        self.kernel = kernel
        self.n = int(n)
        self.stream = _as_stream(stream, 0x5347)
        self.locality = base.locality
        self.tag = f"{base.tag}-sg"

    def offsets(self, d):
        return self.kernel.offsets(self.stream.fresh(), d, self.n)

    def explain_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m, d = X.shape
        xi = self.offsets(d)
        out = np.empty_like(X)
        rows = max(1, _CHUNK // self.n)
        for i in range(0, m, rows):
            Z = (X[i:i + rows, None, :] + xi[None, :, :]).reshape(-1, d)
            out[i:i + rows] = self.base.explain_batch(model, Z).reshape(-1, self.n, d).mean(axis=1)
        return out

    def _baseline_used(self, x):
        return self.base._baseline_used(x)


def _optimal_solve(A, b, lam, efficiency=None):
    if efficiency is None:
        return solve_regularized(A, b, lam)
    d = A.shape[0]
    ridge = effective_ridge(A, lam)
    K = np.zeros((d + 1, d + 1))
    K[:d, :d] = A + ridge * np.eye(d)
    K[:d, d] = K[d, :d] = 1.0
    return np.linalg.solve(K, np.append(b, efficiency))[:d]


class OptimalExplainer(Explainer):
    """The infidelity-minimising explanation for a perturbation family.

    Accumulates ``A = mean(I I^T)`` and ``b = mean(I (f(x) - f(x - I)))`` and
    solves ``A phi = b``. The identity ``I^T IG(f, x, I) = f(x) - f(x - I)``
    removes the path integral from the right-hand side.
    """

    tag = "optimal"

    def __init__(self, family, n=20000, lam=0.0, stream=None):
        self.family = family
        self.n = int(n)
        self.lam = lam
        self.stream = _as_stream(stream, 0x4F50)

    def _draws(self, x):
        n = 1 if self.family.deterministic else self.n
        return self.family.sample(x, n, self.stream.fresh())

    def explain_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty_like(X)
        for r, x in enumerate(X):
            I = self._draws(x).i_vecs
            df = model.evaluate(x) - _evaluations(model, x - I)
            out[r] = solve_regularized(I.T @ I / len(I), I.T @ df / len(I), self.lam)
        return out


class MaskedOptimalExplainer(Explainer):
    """Global optimal explanation ``phi * x`` solved in mask coordinates.

    Regresses ``f(x) - f(x - x*z)`` on the binary masks ``z``, which stays
    well posed when ``x`` has zero coordinates. For the Shapley kernel the
    unbounded weight of the full coalition is imposed as the constraint
    ``sum(phi) = f(x) - f(0)``; pass ``efficiency=False`` to drop it.
    """

    locality = GLOBAL
    tag = "optimal-masked"

    def __init__(self, family, n=20000, lam=0.0, stream=None, efficiency=None):
        if not family.masked:
            raise ValueError(f"{type(family).__name__} has no mask structure")
        self.family = family
        self.n = int(n)
        self.lam = lam
        self.stream = _as_stream(stream, 0x4D4F)
        self.efficiency = isinstance(family, ShapleyKernel) if efficiency is None else efficiency

    def explain_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty_like(X)
        for r, x in enumerate(X):
            n = 1 if self.family.deterministic else self.n
            batch = self.family.sample(x, n, self.stream.fresh())
            Z = batch.masks
            fx = model.evaluate(x)
            df = fx - _evaluations(model, x - x * Z)
            eff = fx - model.evaluate(np.zeros_like(x)) if self.efficiency else None
            out[r] = _optimal_solve(Z.T @ Z / n, Z.T @ df / n, self.lam, eff)
        return out


class GlobalExplainer(Explainer):
    """Turn a local explainer into a global one by multiplying with ``x - x0``."""

    locality = GLOBAL

    def __init__(self, base, x0=None):
        if base.locality != LOCAL:
            raise ValueError("base explainer is already global")
        self.base = base
        self.x0 = x0
        self.tag = f"{base.tag}-global"

    def explain_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        B = np.stack([_baseline_for(self.x0, x) for x in X])
        return self.base.explain_batch(model, X) * (X - B)

    def _baseline_used(self, x):
        return _baseline_for(self.x0, x)


# Functional forms ------------------------------------------------------------


def explain_gradient(model, x):
    return GradientExplainer().explain(model, x)


def explain_integrated_gradients(model, x, baseline=None, steps=128):
    return IntegratedGradientsExplainer(baseline, steps).explain(model, x)


def explain_occlusion1(model, x, baseline=None):
    return Occlusion1Explainer(baseline).explain(model, x)


def explain_shapley_exact(model, x, baseline=None):
    return ShapleyExplainer(baseline).explain(model, x)


def smooth(explainer, kernel, n=200, rng=None):
    """Kernel-smoothed version of ``explainer`` (SmoothGrad for the gradient)."""
    return SmoothedExplainer(explainer, kernel, n, rng)


def explain_optimal(model, x, family, n=20000, lam=0.0, rng=None):
    return OptimalExplainer(family, n, lam, rng).explain(model, x)


def explain_optimal_masked(model, x, family, n=20000, lam=0.0, rng=None, efficiency=None):
    return MaskedOptimalExplainer(family, n, lam, rng, efficiency).explain(model, x)


def to_global(attr, x, x0=None):
    """``values * (x - x0)`` for a local attribution."""
    if attr.locality != LOCAL:
        raise ValueError("attribution is already global")
    x = as_vector(x, "x")
    b = _baseline_for(x0, x)
    return Attribution(attr.values * (x - b), GLOBAL, f"{attr.method_tag}-global", b)
