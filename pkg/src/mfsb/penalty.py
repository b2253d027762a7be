"""Terminal penalties: smooth feature-moment penalties for the equality
ladder and convex-order dual test functions for the weak ladder.

Every test function phi in a :class:`PhiFamily` is convex, continuously
differentiable, 1-Lipschitz and bounded below by 0.  The feature-moment
penalty g(mu) = sum_j w_j (mu(psi_j) - mu_fin(psi_j))^2 vanishes exactly on
moment match but separates mu_fin only within the feature span; the residual
separation defect is surfaced by reporting W2 to a mu_fin sample alongside.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._util import pmean, rng_from
from .measures import ParticleCloud

__all__ = [
    "RidgePhi",
    "SmoothedNormPhi",
    "PhiFamily",
    "default_phi_family",
    "Feature",
    "default_feature_set",
    "PenaltySpec",
    "penalty_value",
    "penalty_lderiv",
    "displacement_convexity_probe",
]


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class RidgePhi:
    """phi(x) = s * softplus((u.x - c)/s): a smoothed hinge along ``u``."""

    direction: np.ndarray
    offset: float
    smoothing: float

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.direction, dtype=float))
        norm = np.linalg.norm(u)
        if norm == 0 or self.smoothing <= 0:
            raise ValueError("ridge needs a nonzero direction and positive smoothing")
        object.__setattr__(self, "direction", u / norm)

    def _z(self, X: np.ndarray) -> np.ndarray:
        return (X @ self.direction - self.offset) / self.smoothing

    def value(self, X: np.ndarray) -> np.ndarray:
        return self.smoothing * _softplus(self._z(np.atleast_2d(X)))

    def grad(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self._z(np.atleast_2d(X)))[:, None] * self.direction

    def regression_features(self, X: np.ndarray) -> list[np.ndarray]:
        X = np.atleast_2d(X)
        return [self.value(X), _sigmoid(self._z(X))]


@dataclass(frozen=True)
class SmoothedNormPhi:
    """phi(x) = sqrt(||x||^2 + s^2) - s: a smoothed norm."""

    smoothing: float

    def __post_init__(self):
        if self.smoothing <= 0:
            raise ValueError("smoothing must be positive")

    def value(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.sqrt(np.sum(X**2, axis=1) + self.smoothing**2) - self.smoothing

    def grad(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        denom = np.sqrt(np.sum(X**2, axis=1) + self.smoothing**2)
        return X / denom[:, None]

    def regression_features(self, X: np.ndarray) -> list[np.ndarray]:
        return [self.value(np.atleast_2d(X))]


@dataclass(frozen=True)
class PhiFamily:
    """Finite family of convex-order dual test functions."""

    members: tuple

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValueError("phi family must be nonempty")
        object.__setattr__(self, "members", tuple(self.members))

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)

    def __getitem__(self, i):
        return self.members[i]


def default_phi_family(target: ParticleCloud, n_directions: int = 16,
                       n_offsets: int = 5, smoothing_factor: float = 0.1,
                       seed: int = 0, include_norm: bool = True) -> PhiFamily:
    """Seeded ridge family: directions uniform on the sphere, offsets at
    quantiles of the target along each direction, smoothing 0.1 * std."""
    rng = rng_from(seed, 0xF1)
    m = target.dim
    dirs = rng.standard_normal((n_directions, m))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    std = float(np.sqrt(np.mean(np.var(target.points, axis=0))))
    s = max(smoothing_factor * std, 1e-8)
    qs = (np.arange(n_offsets) + 0.5) / n_offsets
    members = []
    for u in dirs:
        proj = target.points @ u
        for c in np.quantile(proj, qs):
            members.append(RidgePhi(u, float(c), s))
    if include_norm:
        members.append(SmoothedNormPhi(s))
    return PhiFamily(tuple(members))


@dataclass(frozen=True)
class Feature:
    """Named scalar feature with gradient: value(X) -> (n,), grad(X) -> (n, m)."""

    name: str
    value: Callable
    grad: Callable


def _monomial_feature(coord: int, power: int) -> Feature:
    def value(X, coord=coord, power=power):
        return np.atleast_2d(X)[:, coord] ** power

    def grad(X, coord=coord, power=power):
        X = np.atleast_2d(X)
        g = np.zeros_like(X)
        g[:, coord] = power * X[:, coord] ** (power - 1)
        return g

    return Feature(f"x{coord}^{power}", value, grad)


def _bump_feature(coord: int, center: float, width: float) -> Feature:
    def value(X, coord=coord, center=center, width=width):
        z = (np.atleast_2d(X)[:, coord] - center) / width
        return np.exp(-0.5 * z**2)

    def grad(X, coord=coord, center=center, width=width):
        X = np.atleast_2d(X)
        z = (X[:, coord] - center) / width
        g = np.zeros_like(X)
        g[:, coord] = -z / width * np.exp(-0.5 * z**2)
        return g

    return Feature(f"bump(x{coord};{center:.3g},{width:.3g})", value, grad)


def default_feature_set(target: ParticleCloud, degree: int = 2,
                        bumps_per_dim: int = 8) -> list[Feature]:
    """Coordinate monomials up to ``degree`` plus Gaussian bumps on a
    quantile grid of the target (matches means/covariances exactly and
    shapes approximately)."""
    feats = [_monomial_feature(c, p)
             for c in range(target.dim) for p in range(1, degree + 1)]
    if bumps_per_dim > 0:
        qs = (np.arange(bumps_per_dim) + 0.5) / bumps_per_dim
        for c in range(target.dim):
            centers = np.quantile(target.points[:, c], qs)
            spacing = np.diff(centers)
            width = float(np.median(spacing)) if spacing.size else 1.0
            width = max(width, 1e-6)
            for ctr in centers:
                feats.append(_bump_feature(c, float(ctr), width))
    return feats


class PenaltySpec:
    """Terminal penalty on the law of X_T.

    Kinds:

    * ``feature_moment`` -- g(mu) = sum_j w_j (mu(psi_j) - mu_fin(psi_j))^2,
      the smooth equality-ladder penalty; zero on moment match.
    * ``convex_dual`` -- g(mu) = mu(phi) - mu_fin(phi) for one test function
      (may be negative; L-derivative is grad phi).
    * ``convex_dual_family`` -- max over a finite family of the above, the
      finite-family version of the weak dual distance; its L-derivative is
      grad phi* of the attaining member.
    """

    def __init__(self, kind: str, *, features: Sequence[Feature] = (),
                 weights=None, target: Optional[ParticleCloud] = None,
                 phi=None, family: Optional[PhiFamily] = None):
        self.kind = kind
        self.target = target
        if kind == "feature_moment":
            if not features or target is None:
                raise ValueError("feature_moment needs features and a target cloud")
            self.features = list(features)
            w = np.ones(len(self.features)) if weights is None else np.asarray(weights, float)
            if w.size != len(self.features) or np.any(w <= 0):
                raise ValueError("one positive weight per feature required")
            self.weights = w
            self.target_moments = np.array(
                [pmean(f.value(target.points)) for f in self.features])
        elif kind == "convex_dual":
            if phi is None or target is None:
                raise ValueError("convex_dual needs a phi member and a target cloud")
            self.phi = phi
            self.target_value = float(pmean(phi.value(target.points)))
        elif kind == "convex_dual_family":
            if family is None or target is None:
                raise ValueError("convex_dual_family needs a family and a target cloud")
            self.family = family
            self.target_values = np.array(
                [float(pmean(phi.value(target.points))) for phi in family])
        else:
            raise ValueError(f"unknown penalty kind {kind!r}")

    # -- helpers -------------------------------------------------------------
    @classmethod
    def feature_moment(cls, features, target, weights=None) -> "PenaltySpec":
        return cls("feature_moment", features=features, target=target, weights=weights)

    @classmethod
    def convex_dual(cls, phi, target) -> "PenaltySpec":
        return cls("convex_dual", phi=phi, target=target)

    @classmethod
    def convex_dual_family(cls, family, target) -> "PenaltySpec":
        return cls("convex_dual_family", family=family, target=target)

    @property
    def law_free_gradient(self) -> bool:
        """True when the L-derivative does not depend on the evaluated law."""
        return self.kind == "convex_dual"

    def feature_gaps(self, cloud: ParticleCloud) -> np.ndarray:
        return np.array([pmean(f.value(cloud.points)) for f in self.features]) \
            - self.target_moments

    def _argmax_member(self, cloud: ParticleCloud):
        gaps = np.array([float(pmean(phi.value(cloud.points))) for phi in self.family]) \
            - self.target_values
        return int(np.argmax(gaps)), float(np.max(gaps))

    def regression_features(self) -> list[Callable]:
        """Scalar basis extensions handed to the backward regression."""
        if self.kind == "feature_moment":
            return [f.value for f in self.features]
        if self.kind == "convex_dual":
            probe = np.zeros((1, self.target.dim))
            count = len(self.phi.regression_features(probe))
            return [lambda X, i=i, phi=self.phi: phi.regression_features(X)[i]
                    for i in range(count)]
        return [phi.value for phi in self.family]


def penalty_value(p: PenaltySpec, cloud: ParticleCloud) -> float:
    """g evaluated at the empirical law of ``cloud``."""
    if p.target is not None and cloud.dim != p.target.dim:
        raise ValueError("cloud dimension does not match the penalty target")
    if p.kind == "feature_moment":
        gaps = p.feature_gaps(cloud)
        return float(np.sum(p.weights * gaps**2))
    if p.kind == "convex_dual":
        return float(pmean(p.phi.value(cloud.points)) - p.target_value)
    _, gap = p._argmax_member(cloud)
    return gap


def _lderiv_batch(p: PenaltySpec, cloud: ParticleCloud, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if p.kind == "feature_moment":
        gaps = p.feature_gaps(cloud)
        out = np.zeros_like(X)
        for wj, gapj, f in zip(p.weights, gaps, p.features):
            out += 2.0 * wj * gapj * f.grad(X)
        return out
    if p.kind == "convex_dual":
        return p.phi.grad(X)
    idx, _ = p._argmax_member(cloud)
    return p.family[idx].grad(X)


def penalty_lderiv(p: PenaltySpec, cloud: ParticleCloud, x) -> np.ndarray:
    """L-derivative d_mu g(law(cloud))(x)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return _lderiv_batch(p, cloud, x[None, :])[0]


def displacement_convexity_probe(p: PenaltySpec, a: ParticleCloud,
                                 b: ParticleCloud) -> float:
    """Average of (x - y) . (d_mu g(a)(x) - d_mu g(b)(y)) over the pointwise
    coupling of two equal-size clouds; nonnegative for convex-dual penalties."""
    if a.n != b.n:
        raise ValueError("clouds must have equal sizes for the pointwise coupling")
    ga = _lderiv_batch(p, a, a.points)
    gb = _lderiv_batch(p, b, b.points)
    diff = a.points - b.points
    return float(pmean(np.sum(diff * (ga - gb), axis=1)))
