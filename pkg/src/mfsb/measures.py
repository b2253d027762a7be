"""Empirical measures: particle clouds, target-law sampling and Wasserstein
distances between clouds.

A :class:`ParticleCloud` is a uniformly weighted sample of points in R^m and
stands in for an empirical measure throughout the package.  Distances are
exact (sorted coupling in 1-D, optimal assignment up to ``exact_threshold``
points) and fall back to a max-sliced estimate for large multivariate clouds.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._util import pmean, rng_from

__all__ = [
    "ParticleCloud",
    "MeasureSpec",
    "sample",
    "wasserstein",
    "wasserstein_info",
    "wasserstein_1d_weighted",
    "convex_order_gap",
    "empirical_moments",
    "MomentVector",
    "EXACT_THRESHOLD",
    "SLICED_PROJECTIONS",
]

EXACT_THRESHOLD = 512
SLICED_PROJECTIONS = 64


@dataclass(frozen=True)
class ParticleCloud:
    """Uniformly weighted point set in R^m (one point per row)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("cloud needs at least one point of fixed dimension")
        if not np.all(np.isfinite(pts)):
            raise ValueError("cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return pmean(self.points, axis=0)

    def second_moment(self) -> np.ndarray:
        return pmean(self.points**2, axis=0)

    def subsample(self, size: int, seed: int) -> "ParticleCloud":
        """Seeded subsample without replacement (used to equalize cloud sizes)."""
        if size >= self.n:
            return self
        idx = rng_from(seed, 0xC1).choice(self.n, size=size, replace=False)
        return ParticleCloud(self.points[np.sort(idx)])


class MeasureSpec:
    """Parametric target law: gaussian, gaussian_mixture, uniform_box or an
    empirical file (one point per line, whitespace-separated floats)."""

    def __init__(self, kind: str, dim: int, **params):
        self.kind = kind
        self.dim = int(dim)
        self.params = params
        self._validate()

    # -- constructors -------------------------------------------------------
    @classmethod
    def gaussian(cls, mean, cov) -> "MeasureSpec":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls("gaussian", mean.size, mean=mean, cov=cov)

    @classmethod
    def gaussian_mixture(cls, components: Sequence[tuple]) -> "MeasureSpec":
        comps = [(float(w), np.atleast_1d(np.asarray(mu, dtype=float)),
                  np.atleast_2d(np.asarray(c, dtype=float))) for w, mu, c in components]
        return cls("gaussian_mixture", comps[0][1].size, components=comps)

    @classmethod
    def uniform_box(cls, lo, hi) -> "MeasureSpec":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        return cls("uniform_box", lo.size, lo=lo, hi=hi)

    @classmethod
    def empirical(cls, path: str, dim: int) -> "MeasureSpec":
        return cls("empirical", dim, path=str(path))

    # -- validation ---------------------------------------------------------
    def _validate(self):
        if self.kind == "gaussian":
            self._check_gaussian(self.params["mean"], self.params["cov"])
        elif self.kind == "gaussian_mixture":
            comps = self.params["components"]
            total = sum(w for w, _, _ in comps)
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"mixture weights sum to {total!r}, expected 1 within 1e-12")
            for w, mu, cov in comps:
                if w <= 0:
                    raise ValueError("mixture weights must be positive")
                self._check_gaussian(mu, cov)
        elif self.kind == "uniform_box":
            lo, hi = self.params["lo"], self.params["hi"]
            if lo.size != self.dim or hi.size != self.dim or np.any(hi <= lo):
                raise ValueError("uniform_box requires lo < hi componentwise")
        elif self.kind == "empirical":
            pass  # file is checked on first load
        else:
            raise ValueError(f"unknown measure kind {self.kind!r}")

    def _check_gaussian(self, mean, cov):
        if mean.size != self.dim or cov.shape != (self.dim, self.dim):
            raise ValueError("gaussian mean/covariance dimensions inconsistent")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")

    def load_points(self) -> np.ndarray:
        path = self.params["path"]
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                vals = line.split()
                if len(vals) != self.dim:
                    raise ValueError(
                        f"{path}:{lineno}: expected {self.dim} columns, got {len(vals)}")
                try:
                    rows.append([float(v) for v in vals])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed float") from exc
        if not rows:
            raise ValueError(f"{path}: empirical file holds no points")
        pts = np.asarray(rows, dtype=float)
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"{path}: non-finite entries")
        return pts


def sample(spec: MeasureSpec, n: int, seed: int) -> ParticleCloud:
    """Draw ``n`` i.i.d. points from ``spec``; deterministic given ``seed``."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = rng_from(seed, 0x5A)
    m = spec.dim
    if spec.kind == "gaussian":
        chol = np.linalg.cholesky(spec.params["cov"])
        z = rng.standard_normal((n, m))
        pts = spec.params["mean"] + z @ chol.T
    elif spec.kind == "gaussian_mixture":
        comps = spec.params["components"]
        weights = np.array([w for w, _, _ in comps])
        labels = rng.choice(len(comps), size=n, p=weights / weights.sum())
        z = rng.standard_normal((n, m))
        pts = np.empty((n, m))
        for ci, (_, mu, cov) in enumerate(comps):
            mask = labels == ci
            if np.any(mask):
                pts[mask] = mu + z[mask] @ np.linalg.cholesky(cov).T
    elif spec.kind == "uniform_box":
        lo, hi = spec.params["lo"], spec.params["hi"]
        pts = lo + rng.random((n, m)) * (hi - lo)
    elif spec.kind == "empirical":
        data = spec.load_points()
        idx = rng.integers(0, data.shape[0], size=n)
        pts = data[idx]
    else:  # pragma: no cover - guarded in __init__
        raise ValueError(f"unknown measure kind {spec.kind!r}")
    return ParticleCloud(pts)


# ---------------------------------------------------------------------------
# Wasserstein distances
# ---------------------------------------------------------------------------

def _w_1d(p: int, x: np.ndarray, y: np.ndarray) -> float:
    xs, ys = np.sort(x), np.sort(y)
    return float(pmean(np.abs(xs - ys) ** p) ** (1.0 / p))


def wasserstein_info(p: int, a: ParticleCloud, b: ParticleCloud, *,
                     exact_threshold: int = EXACT_THRESHOLD,
                     projections: int = SLICED_PROJECTIONS,
                     seed: int = 0) -> tuple[float, str]:
    """W_p distance between two clouds together with the mode used.

    Exact for 1-D clouds (sorted coupling) and for clouds of at most
    ``exact_threshold`` points (optimal assignment).  Larger multivariate
    clouds use a max-sliced estimate over ``projections`` seeded directions,
    a lower bound that is tight for clouds supported on a line.  Unequal
    sizes are handled by seeded subsampling to the smaller size (an
    approximation, recorded in the mode string).
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    resampled = ""
    if a.n != b.n:
        size = min(a.n, b.n)
        a, b = a.subsample(size, seed), b.subsample(size, seed + 1)
        resampled = "+subsampled"
    if a.dim == 1:
        return _w_1d(p, a.points[:, 0], b.points[:, 0]), "exact-1d" + resampled
    if a.n <= exact_threshold:
        diff = a.points[:, None, :] - b.points[None, :, :]
        cost = np.linalg.norm(diff, axis=2) ** p
        rows, cols = linear_sum_assignment(cost)
        return float(pmean(cost[rows, cols]) ** (1.0 / p)), "exact-assignment" + resampled
    rng = rng_from(seed, 0x51)
    dirs = rng.standard_normal((projections, a.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    best = 0.0
    for u in dirs:
        best = max(best, _w_1d(p, a.points @ u, b.points @ u))
    return best, f"max-sliced-{projections}" + resampled


def wasserstein(p: int, a: ParticleCloud, b: ParticleCloud, **kwargs) -> float:
    """W_p distance between two clouds (see :func:`wasserstein_info`)."""
    return wasserstein_info(p, a, b, **kwargs)[0]


def wasserstein_1d_weighted(x_a, w_a, x_b, w_b, p: int = 2) -> float:
    """Exact W_p between two weighted discrete 1-D distributions.

    Integrates |F_a^{-1}(q) - F_b^{-1}(q)|^p over the common refinement of
    the two quantile partitions.
    """
    x_a = np.asarray(x_a, dtype=float)
    x_b = np.asarray(x_b, dtype=float)
    w_a = np.asarray(w_a, dtype=float) / np.sum(w_a)
    w_b = np.asarray(w_b, dtype=float) / np.sum(w_b)
    ia, ib = np.argsort(x_a), np.argsort(x_b)
    xa, wa = x_a[ia], w_a[ia]
    xb, wb = x_b[ib], w_b[ib]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    qs = np.union1d(ca, cb)
    qs = qs[(qs > 1e-15) & (qs <= 1.0 + 1e-15)]
    prev = 0.0
    total = 0.0
    for q in qs:
        seg = q - prev
        if seg <= 0:
            continue
        mid = 0.5 * (prev + q)
        va = xa[min(np.searchsorted(ca, mid), len(xa) - 1)]
        vb = xb[min(np.searchsorted(cb, mid), len(xb) - 1)]
        total += seg * abs(va - vb) ** p
        prev = q
    return float(total ** (1.0 / p))


def convex_order_gap(a: ParticleCloud, target: ParticleCloud, family) -> float:
    """max_phi [ mean_a(phi) - mean_target(phi) ] over the test family.

    A finite lower bound on the convex-order dual distance; a gap below
    tolerance means "convex order satisfied within the family".
    """
    if a.dim != target.dim:
        raise ValueError("dimension mismatch between cloud and target")
    members = list(family)
    if not members:
        raise ValueError("empty test-function family")
    gaps = [float(pmean(phi.value(a.points)) - pmean(phi.value(target.points)))
            for phi in members]
    return max(gaps)


class MomentVector(NamedTuple):
    exponents: tuple
    values: np.ndarray


def empirical_moments(a: ParticleCloud, degree: int) -> MomentVector:
    """All monomial moments of total degree 1..degree, exact averages.

    Exponent tuples are ordered by total degree then lexicographically, so
    the layout is deterministic and usable as a feature vector.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    m = a.dim
    exps = []
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(m), d):
            e = [0] * m
            for c in combo:
                e[c] += 1
            exps.append(tuple(e))
    exps = sorted(set(exps), key=lambda e: (sum(e), e))
    vals = np.array([float(pmean(np.prod(a.points ** np.array(e), axis=1)))
                     for e in exps])
    return MomentVector(tuple(exps), vals)
