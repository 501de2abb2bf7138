"""Seeded random streams, small dense solves and rank statistics.

Every stochastic routine in the package draws from an :class:`RngStream`.
A stream is keyed by ``(seed, path)`` where ``path`` is a tuple of
non-negative integers; the key feeds a :class:`numpy.random.SeedSequence`
that initialises a Philox counter-based generator, so a given key yields the
same draws on every platform and in every process.
"""
import warnings

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "RngStream",
    "RankVarianceWarning",
    "as_stream",
    "as_vector",
    "as_matrix",
    "derive_stream",
    "effective_ridge",
    "solve_regularized",
    "sample_uniform_box",
    "sample_l2_ball",
    "sample_gaussian",
    "spearman_correlation",
]

_UINT64_MAX = 2**64 - 1


class RankVarianceWarning(RuntimeWarning):
    """Raised when a rank correlation is requested for a constant vector."""


def _check_uint64(value, name):
    value = int(value)
    if value < 0 or value > _UINT64_MAX:
        raise ValueError(f"{name} must fit in an unsigned 64-bit integer, got {value}")
    return value


class RngStream:
    """A reproducible stream of random draws.

    Parameters
    ----------
    seed : int
        Unsigned 64-bit seed.
    path : tuple of int
        Stream identifier. ``derive_stream(seed, k)`` uses ``path=(k,)`` and
        :meth:`child` appends further components.

    Notes
    -----
    The stream is stateful: each draw advances it. :meth:`fresh` returns a new
    stream positioned at the start of the same key and :meth:`copy` clones the
    current position; neither affects ``self``.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed, path=(0,)):
        self.seed = _check_uint64(seed, "seed")
        self.path = tuple(_check_uint64(p, "stream id") for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"

    @property
    def stream_id(self):
        return self.path[-1] if self.path else 0

    @property
    def generator(self):
        """The underlying :class:`numpy.random.Generator` (shares state)."""
        return self._gen

    def child(self, *ids):
        """Independent sub-stream keyed by ``path + ids``, at its start."""
        return RngStream(self.seed, self.path + tuple(ids))

    def fresh(self):
        return RngStream(self.seed, self.path)

    def copy(self):
        out = RngStream(self.seed, self.path)
        out._gen.bit_generator.state = self._gen.bit_generator.state
        return out

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


def derive_stream(seed, stream_id=0):
    """Return the stream keyed by ``(seed, stream_id)``.

    Streams with different ids are statistically independent, and the same
    pair always reproduces the same sequence.
    """
    return RngStream(seed, (stream_id,))


def as_stream(rng, default_id=0):
    """Coerce ``None``, an integer seed or an :class:`RngStream` to a stream.

    Streams are returned as given so that callers keep advancing them.
    """
    if isinstance(rng, RngStream):
        return rng
    return RngStream(0 if rng is None else int(rng), (default_id,))


def as_vector(x, name="vector"):
    """Validate and return a finite 1-d float array."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise ValueError(f"{name} must be a non-empty 1-d array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite entries")
    return x


def as_matrix(A, name="matrix"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def _check_symmetric(A):
    scale = np.max(np.abs(A))
    if scale > 0 and np.max(np.abs(A - A.T)) > 1e-8 * scale:
        raise ValueError("matrix is not symmetric")


def _is_singular(eigvals):
    top = np.max(np.abs(eigvals))
    # a matrix with only subnormal entries carries no usable precision
    return top < np.finfo(float).tiny or np.min(eigvals) <= 1e-12 * top


def effective_ridge(A, lam=0.0):
    """Ridge actually applied by :func:`solve_regularized` for ``(A, lam)``.

    A positive ``lam`` is used as given. With ``lam == 0`` the matrix is used
    unregularised unless it is numerically singular, in which case the ridge
    falls back to ``1e-6 * trace(A) / d`` (``1e-9`` if that underflows or the
    trace vanishes).
    """
    A = as_matrix(A)
    _check_symmetric(A)
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if lam > 0:
        return float(lam)
    if not _is_singular(np.linalg.eigvalsh(A)):
        return 0.0
    ridge = 1e-6 * float(np.trace(A)) / A.shape[0]
    # a trace at the edge of the float range counts as zero
    return ridge if ridge >= np.finfo(float).tiny else 1e-9


def solve_regularized(A, b, lam=0.0):
    """Solve ``(A + lam*I) x = b`` for symmetric positive semidefinite ``A``.

    Parameters
    ----------
    A : array_like, shape (d, d)
    b : array_like, shape (d,)
    lam : float
        Ridge. Zero means "no ridge unless ``A`` is singular"; see
        :func:`effective_ridge`.

    Returns
    -------
    x : ndarray, shape (d,)
    """
    A = as_matrix(A)
    b = as_vector(b, "b")
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, b has {b.shape[0]} entries")
    lam = effective_ridge(A, lam)
    # eigh keeps the null-space noise of near rank-deficient A out of the range
    w, V = np.linalg.eigh((A + A.T) / 2)
    w = np.maximum(w, 0.0) + lam
    return V @ ((V.T @ b) / w)


def _center_and_size(center, size):
    center = as_vector(center, "center")
    shape = center.shape if size is None else (int(size),) + center.shape
    return center, shape


def sample_uniform_box(rng, center, radius, size=None):
    """Uniform draw(s) from the L-infinity ball ``{y : max|y - center| <= radius}``."""
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    center, shape = _center_and_size(center, size)
    if radius == 0:
        return np.broadcast_to(center, shape).copy()
    return center + rng.uniform(-radius, radius, size=shape)


def sample_l2_ball(rng, center, radius, size=None):
    """Uniform draw(s) from the Euclidean ball of the given radius.

    Uses a Gaussian direction and a ``U**(1/d)`` radial law, which is exact in
    any dimension (rejection from the cube degrades quickly past d ~ 10).
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    center, shape = _center_and_size(center, size)
    if radius == 0:
        return np.broadcast_to(center, shape).copy()
    d = center.shape[0]
    g = rng.normal(size=shape)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    u = rng.uniform(size=shape[:-1] + (1,))
    return center + radius * (g / norms) * u ** (1.0 / d)


def sample_gaussian(rng, mean, sigma, size=None):
    """Draw ``mean + sigma * xi`` with ``xi`` i.i.d. standard normal."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    mean, shape = _center_and_size(mean, size)
    if sigma == 0:
        return np.broadcast_to(mean, shape).copy()
    return mean + sigma * rng.normal(size=shape)


def spearman_correlation(a, b):
    """Spearman rank correlation with average ranks for ties.

    A constant input has no rank variance; the correlation is then reported
    as 0 and a :class:`RankVarianceWarning` is emitted.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("need at least two entries for a rank correlation")
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if denom == 0:
        warnings.warn("constant input: rank variance is zero", RankVarianceWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(ra, rb) / denom, -1.0, 1.0))
