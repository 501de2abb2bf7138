"""Perturbation distributions used to define infidelity.

A family turns a test input ``x`` into random perturbation vectors ``I``; the
infidelity compares ``I^T phi`` with ``f(x) - f(x - I)``. Mask-structured
families additionally expose the binary vector ``z`` with ``I = x * z``.
"""
import abc
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .numerics import as_vector

__all__ = [
    "BaselineDiff",
    "CoordinateEps",
    "CoordinateTimesX",
    "MultiBaseline",
    "NoisyBaseline",
    "PerturbationBatch",
    "PerturbationFamily",
    "PerturbationSample",
    "ShapleyKernel",
    "SquareRemoval",
    "SubsetBaseline",
    "draw",
    "draw_square_mask",
    "second_moment",
    "shapley_size_probabilities",
    "shapley_subset_distribution",
]


class PerturbationSample(NamedTuple):
    i_vec: np.ndarray
    mask: Optional[np.ndarray] = None


@dataclass(frozen=True)
class PerturbationBatch:
    """``n`` perturbations as rows; ``masks`` is ``None`` for unmasked families."""

    i_vecs: np.ndarray
    masks: Optional[np.ndarray] = None

    def __len__(self):
        return self.i_vecs.shape[0]

    def __getitem__(self, k):
        mask = None if self.masks is None else self.masks[k]
        return PerturbationSample(self.i_vecs[k], mask)


def _baseline(x0, x):
    if x0 is None:
        return np.zeros_like(x)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        return np.full_like(x, float(x0))
    if x0.shape != x.shape:
        raise ValueError(f"baseline has shape {x0.shape}, input has {x.shape}")
    return x0


class PerturbationFamily(abc.ABC):
    """Base class. Subclasses implement :meth:`sample`."""

    deterministic = False
    masked = False
    name = "family"

    @abc.abstractmethod
    def sample(self, x, n, rng):
        """Draw ``n`` i.i.d. perturbations for input ``x`` as a :class:`PerturbationBatch`."""

    def draw(self, x, rng):
        batch = self.sample(x, 1, rng)
        return batch[0]


def draw(family, x, rng):
    """One sample from ``family`` at ``x``."""
    return family.draw(x, rng)


def _repeat(v, n):
    return np.broadcast_to(v, (n,) + v.shape).copy()


@dataclass(frozen=True)
class BaselineDiff(PerturbationFamily):
    """Deterministic ``I = x - x0`` (``x0`` defaults to the origin)."""

    x0: object = None
    deterministic = True
    name = "baseline"

    def sample(self, x, n, rng=None):
        x = as_vector(x, "x")
        return PerturbationBatch(_repeat(x - _baseline(self.x0, x), n))


@dataclass(frozen=True)
class SubsetBaseline(PerturbationFamily):
    """Deterministic ``I = x - x[S := x0_S]``; nonzero only on ``subset``.

    With the default zero baseline this is mask-structured with ``z = 1_S``.
    """

    subset: tuple = ()
    x0: object = None
    deterministic = True
    name = "subset-baseline"

    @property
    def masked(self):
        return self.x0 is None

    def sample(self, x, n, rng=None):
        x = as_vector(x, "x")
        z = np.zeros_like(x)
        z[list(self.subset)] = 1.0
        I = (x - _baseline(self.x0, x)) * z
        return PerturbationBatch(_repeat(I, n), _repeat(z, n) if self.masked else None)


@dataclass(frozen=True)
class NoisyBaseline(PerturbationFamily):
    """``I = x - (x0 + sigma * xi)`` with ``xi`` standard normal."""

    x0: object = None
    sigma: float = 1.0
    name = "noisy-baseline"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")

    def sample(self, x, n, rng):
        x = as_vector(x, "x")
        noise = self.sigma * rng.normal(size=(n, x.size))
        return PerturbationBatch(x - _baseline(self.x0, x) - noise)


@dataclass(frozen=True)
class MultiBaseline(PerturbationFamily):
    """``I = x - x0`` with ``x0`` drawn from a finite set of baselines."""

    baselines: tuple = ()
    weights: Optional[tuple] = None
    name = "multi-baseline"

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.baselines, dtype=float))
        if B.size == 0:
            raise ValueError("need at least one baseline")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (B.shape[0],) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
                raise ValueError("weights must be a probability vector, one entry per baseline")

    def sample(self, x, n, rng):
        x = as_vector(x, "x")
        B = np.atleast_2d(np.asarray(self.baselines, dtype=float))
        if B.shape[1] != x.size:
            raise ValueError(f"baselines have dimension {B.shape[1]}, input has {x.size}")
        idx = rng.choice(B.shape[0], size=n, p=None if self.weights is None else np.asarray(self.weights))
        return PerturbationBatch(x - B[idx])


@dataclass(frozen=True)
class CoordinateEps(PerturbationFamily):
    """``I = epsilon * e_i`` with ``i`` uniform over coordinates."""

    epsilon: float = 1e-3
    name = "coord-eps"

    def sample(self, x, n, rng):
        x = as_vector(x, "x")
        idx = rng.integers(0, x.size, size=n)
        I = np.zeros((n, x.size))
        I[np.arange(n), idx] = self.epsilon
        return PerturbationBatch(I)


@dataclass(frozen=True)
class CoordinateTimesX(PerturbationFamily):
    """``I = e_i * x`` with ``i`` uniform; the mask is the singleton ``e_i``."""

    masked = True
    name = "coord-x"

    def sample(self, x, n, rng):
        x = as_vector(x, "x")
        idx = rng.integers(0, x.size, size=n)
        Z = np.zeros((n, x.size))
        Z[np.arange(n), idx] = 1.0
        return PerturbationBatch(Z * x, Z)


def shapley_size_probabilities(d):
    """Probability of each coalition size ``k = 1..d-1`` under the Shapley kernel."""
    if d < 2:
        raise ValueError(f"the Shapley kernel needs d >= 2, got {d}")
    k = np.arange(1, d)
    per_subset = (d - 1) / (np.array([math.comb(d, int(j)) for j in k]) * k * (d - k))
    mass = per_subset * np.array([math.comb(d, int(j)) for j in k])
    return k, mass / mass.sum()


def shapley_subset_distribution(d):
    """``[(k, p_k), ...]``: per-subset probability for every proper non-empty size ``k``.

    Each of the ``C(d, k)`` subsets of size ``k`` has probability ``p_k``; the
    empty and full subsets are excluded because their kernel weight is
    unbounded.
    """
    k, size_prob = shapley_size_probabilities(d)
    return [(int(j), float(p / math.comb(d, int(j)))) for j, p in zip(k, size_prob)]


@dataclass(frozen=True)
class ShapleyKernel(PerturbationFamily):
    """``I = x * Z`` with ``Z`` drawn from the Shapley-kernel subset law.

    The full coalition carries unbounded kernel weight; samplers never emit it,
    and the masked optimal explanation enforces it as an efficiency constraint.
    """

    masked = True
    name = "shapley"

    def sample(self, x, n, rng):
        x = as_vector(x, "x")
        d = x.size
        sizes, probs = shapley_size_probabilities(d)
        k = rng.choice(sizes, size=n, p=probs)
        # rank of a uniform key gives a uniformly random subset of each size
        ranks = np.argsort(np.argsort(rng.uniform(size=(n, d)), axis=1), axis=1)
        Z = (ranks < k[:, None]).astype(float)
        return PerturbationBatch(Z * x, Z)


def _check_square(height, width, smin, smax):
    if not (1 <= smin <= smax <= min(height, width)):
        raise ValueError(
            f"need 1 <= smin <= smax <= min(height, width); got smin={smin}, smax={smax}, "
            f"height={height}, width={width}"
        )


def _square_masks(rng, height, width, smin, smax, n):
    s = rng.integers(smin, smax + 1, size=n)
    top = rng.integers(0, height - s + 1)
    left = rng.integers(0, width - s + 1)
    rows = np.arange(height)[None, :, None]
    cols = np.arange(width)[None, None, :]
    t, l, s_ = top[:, None, None], left[:, None, None], s[:, None, None]
    masks = (rows >= t) & (rows < t + s_) & (cols >= l) & (cols < l + s_)
    return masks.reshape(n, height * width).astype(float)


def draw_square_mask(rng, height, width, smin, smax):
    """One flattened (row-major) square patch mask.

    The side is uniform on ``smin..smax`` and the top-left corner is uniform
    over the placements that keep the whole square inside the image.
    """
    _check_square(height, width, smin, smax)
    return _square_masks(rng, height, width, smin, smax, 1)[0]


@dataclass(frozen=True)
class SquareRemoval(PerturbationFamily):
    """``I = x * Z`` with ``Z`` a random square patch on a ``height x width`` grid."""

    height: int = 28
    width: int = 28
    smin: int = 1
    smax: int = 10
    masked = True
    name = "square"

    def __post_init__(self):
        _check_square(self.height, self.width, self.smin, self.smax)

    def sample(self, x, n, rng):
        x = as_vector(x, "x")
        if x.size != self.height * self.width:
            raise ValueError(
                f"square removal on a {self.height}x{self.width} grid needs d = "
                f"{self.height * self.width}, got {x.size}"
            )
        Z = _square_masks(rng, self.height, self.width, self.smin, self.smax, n)
        return PerturbationBatch(Z * x, Z)


def second_moment(family, x, n, rng):
    """``E[I I^T]``: exact for deterministic families, an ``n``-sample mean otherwise."""
    x = as_vector(x, "x")
    if family.deterministic:
        I = family.sample(x, 1, rng).i_vecs[0]
        return np.outer(I, I)
    if n < 1:
        raise ValueError("need n >= 1 samples")
    I = family.sample(x, n, rng).i_vecs
    M = I.T @ I / n
    return (M + M.T) / 2
