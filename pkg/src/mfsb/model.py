"""Problem data: control costs, interaction drifts and the FBSDE right-hand
sides built from them.

The control cost splits as f = f1(t, a) + f2(t, x, mu) with f1 convex and
coercive.  ``lambda_min`` computes the pointwise minimizer of
f1(t, a) + a . y, ``h1`` the corresponding Hamiltonian value, ``drift_B`` the
forward drift Lambda + b and ``sensitivity_F`` the first-order sensitivity of
the measure-coupled Hamiltonian that drives the backward equation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._util import pmean
from .measures import MeasureSpec, ParticleCloud

__all__ = [
    "CostSpec",
    "F2Spec",
    "InteractionSpec",
    "ProblemSpec",
    "LambdaRootFindError",
    "lambda_min",
    "h1",
    "drift_B",
    "sensitivity_F",
    "running_cost",
]

# constants of f1(a) = a^2 + asinh(a): extrema of a / (1+a^2)^{3/2} are
# +-2/(3*sqrt(3)), so f1'' ranges over [2 - 2/(3√3), 2 + 2/(3√3)].
_ASINH_CURV = 2.0 / (3.0 * np.sqrt(3.0))


class LambdaRootFindError(RuntimeError):
    """Inner root-find for the control minimizer failed to converge."""


@dataclass(frozen=True)
class F2Spec:
    """State/law running cost f2 with its gradient and L-derivative.

    Callbacks are vectorized: ``value(t, X, cloud) -> (n,)``,
    ``grad_x(t, X, cloud) -> (n, m)``, ``lderiv(t, Xtilde, cloud, Xeval) ->
    (n_eval, n_tilde, m)`` giving d_mu f2(t, x~_j, mu)(x_i).
    """

    value: Optional[Callable] = None
    grad_x: Optional[Callable] = None
    lderiv: Optional[Callable] = None

    @property
    def is_zero(self) -> bool:
        return self.value is None


@dataclass(frozen=True)
class CostSpec:
    """Control cost f1 plus optional f2; carries convexity metadata.

    ``lambda_f1`` is the strong-convexity constant of f1 and ``ell_f1`` the
    Lipschitz constant of its gradient; the monotonicity constant of the
    minimizer map is 1/ell_f1 (Baillon-Haddad), which reduces to 1/lambda_f1
    in the quadratic case.  ``coercivity`` stores (p, C1, C2) with
    f1 >= C1 + C2 * ||a||^p.
    """

    f1_kind: str
    f2: F2Spec = field(default_factory=F2Spec)
    power: float = 2.0
    scale: float = 0.5
    lambda_f1: Optional[float] = None
    ell_f1: Optional[float] = None
    coercivity: tuple = (2.0, 0.0, 0.5)
    grad: Optional[Callable] = None
    value_fn: Optional[Callable] = None

    # -- constructors -------------------------------------------------------
    @classmethod
    def quadratic(cls, f2: F2Spec | None = None) -> "CostSpec":
        return cls("quadratic", f2=f2 or F2Spec(), lambda_f1=1.0, ell_f1=1.0,
                   coercivity=(2.0, 0.0, 0.5))

    @classmethod
    def power_cost(cls, p: float, scale: float, f2: F2Spec | None = None) -> "CostSpec":
        if not 1.0 < p < 2.0 or scale <= 0:
            raise ValueError("power cost needs p in (1,2) and scale > 0")
        return cls("power", f2=f2 or F2Spec(), power=p, scale=scale,
                   coercivity=(p, 0.0, scale))

    @classmethod
    def quadratic_plus_asinh(cls, f2: F2Spec | None = None) -> "CostSpec":
        # 1-D: f1(a) = a^2 + asinh(a); strongly convex, gradient Lipschitz.
        return cls("quadratic_plus_asinh", f2=f2 or F2Spec(),
                   lambda_f1=2.0 - _ASINH_CURV, ell_f1=2.0 + _ASINH_CURV,
                   coercivity=(2.0, -0.5, 0.5))

    @classmethod
    def custom_strongly_convex(cls, value_fn, grad, lambda_f1: float,
                               ell_f1: float | None = None,
                               coercivity: tuple = (2.0, 0.0, 0.1),
                               f2: F2Spec | None = None) -> "CostSpec":
        if lambda_f1 <= 0:
            raise ValueError("lambda_f1 must be positive")
        return cls("custom", f2=f2 or F2Spec(), lambda_f1=lambda_f1,
                   ell_f1=ell_f1, coercivity=coercivity, grad=grad,
                   value_fn=value_fn)

    @property
    def monotonicity_constant(self) -> Optional[float]:
        """c with (y-y').(Lambda(y)-Lambda(y')) <= -c ||y-y'||^2."""
        if self.ell_f1 is not None:
            return 1.0 / self.ell_f1
        return None

    # -- f1 evaluation -------------------------------------------------------
    def f1_value(self, t: float, a: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if self.f1_kind == "quadratic":
            return 0.5 * np.sum(a**2, axis=1)
        if self.f1_kind == "power":
            return self.scale * np.linalg.norm(a, axis=1) ** self.power
        if self.f1_kind == "quadratic_plus_asinh":
            s = a[:, 0]
            return s**2 + np.arcsinh(s)
        if self.f1_kind == "custom":
            return np.asarray(self.value_fn(t, a), dtype=float).reshape(-1)
        raise ValueError(f"unknown f1 kind {self.f1_kind!r}")

    def f1_grad(self, t: float, a: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if self.f1_kind == "quadratic":
            return a.copy()
        if self.f1_kind == "power":
            r = np.linalg.norm(a, axis=1, keepdims=True)
            safe = np.where(r > 0, r, 1.0)
            return self.scale * self.power * safe ** (self.power - 2.0) * a * (r > 0)
        if self.f1_kind == "quadratic_plus_asinh":
            s = a[:, 0]
            return (2.0 * s + 1.0 / np.sqrt(1.0 + s**2))[:, None]
        if self.f1_kind == "custom":
            return np.atleast_2d(np.asarray(self.grad(t, a), dtype=float))
        raise ValueError(f"unknown f1 kind {self.f1_kind!r}")


@dataclass(frozen=True)
class InteractionSpec:
    """Interaction drift b(t, x, mu).

    Kinds: ``none``; ``pairwise_quadratic`` with Psi(x) = ||x||^2/2 (so
    b = -(x - mean(mu)) exactly); ``pairwise_potential`` from callbacks
    ``grad_psi(D) -> (k, m)`` and ``hess_psi(D) -> (k, m, m)``; ``general``
    from callbacks ``b(t, X, cloud) -> (n, m)``, ``dx_b(t, X, cloud) ->
    (n, m, m)`` and ``dmu_b(t, Xtilde, cloud, Xeval) -> (n_eval, n_tilde,
    m, m)``.  ``ell_b`` is the declared Lipschitz constant.
    """

    kind: str = "none"
    grad_psi: Optional[Callable] = None
    hess_psi: Optional[Callable] = None
    b_fn: Optional[Callable] = None
    dx_b: Optional[Callable] = None
    dmu_b: Optional[Callable] = None
    ell_b: float = 0.0

    @classmethod
    def none(cls) -> "InteractionSpec":
        return cls("none", ell_b=0.0)

    @classmethod
    def pairwise_quadratic(cls) -> "InteractionSpec":
        return cls("pairwise_quadratic", ell_b=1.0)

    @classmethod
    def pairwise_potential(cls, grad_psi, hess_psi, ell_b: float) -> "InteractionSpec":
        return cls("pairwise_potential", grad_psi=grad_psi, hess_psi=hess_psi,
                   ell_b=float(ell_b))

    @classmethod
    def general(cls, b_fn, dx_b, dmu_b, ell_b: float) -> "InteractionSpec":
        return cls("general", b_fn=b_fn, dx_b=dx_b, dmu_b=dmu_b, ell_b=float(ell_b))

    @property
    def is_none(self) -> bool:
        return self.kind == "none"


@dataclass(frozen=True)
class ProblemSpec:
    """Full instance: dimension, horizon, diffusion, cost, interaction and
    endpoint laws."""

    dim: int
    horizon: float
    sigma: np.ndarray
    cost: CostSpec
    interaction: InteractionSpec
    mu_in: MeasureSpec
    mu_fin: MeasureSpec

    def __post_init__(self):
        sig = np.asarray(self.sigma, dtype=float)
        if sig.ndim == 0:
            sig = float(sig) * np.eye(self.dim)
        if sig.shape[0] != self.dim:
            raise ValueError("sigma row dimension must match the state dimension")
        if not np.any(sig != 0.0):
            raise ValueError("the diffusion matrix must be nonzero")
        object.__setattr__(self, "sigma", sig)
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.mu_in.dim != self.dim or self.mu_fin.dim != self.dim:
            raise ValueError("endpoint laws must live in the state dimension")

    @property
    def noise_dim(self) -> int:
        return self.sigma.shape[1]

    @property
    def decouples(self) -> bool:
        """True when particles do not interact through the dynamics or cost
        (the terminal condition may still couple them)."""
        return self.interaction.is_none and self.cost.f2.is_zero


# ---------------------------------------------------------------------------
# Lambda and H1
# ---------------------------------------------------------------------------

_ROOT_TOL = 1e-10
_ROOT_MAXIT = 200


def _lambda_batch(cost: CostSpec, t: float, Y: np.ndarray) -> np.ndarray:
    """argmin_a f1(t, a) + a . y, row per particle."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if cost.f1_kind == "quadratic":
        return -Y
    if cost.f1_kind == "power":
        # gradient equation: scale * p * r^{p-1} = ||y||, direction -y/||y||
        norms = np.linalg.norm(Y, axis=1, keepdims=True)
        r = (norms / (cost.scale * cost.power)) ** (1.0 / (cost.power - 1.0))
        safe = np.where(norms > 0, norms, 1.0)
        return -r * Y / safe
    if cost.f1_kind == "quadratic_plus_asinh":
        return _asinh_newton(Y)
    if cost.f1_kind == "custom":
        return _custom_newton(cost, t, Y)
    raise ValueError(f"unknown f1 kind {cost.f1_kind!r}")


def _asinh_newton(Y: np.ndarray) -> np.ndarray:
    """Safeguarded Newton for 2a + 1/sqrt(1+a^2) = -y (monotone in a)."""
    y = Y[:, 0]
    lo = (-y - 1.0) / 2.0 - 0.5
    hi = (-y + 1.0) / 2.0 + 0.5
    a = (-y) / 2.0
    for _ in range(_ROOT_MAXIT):
        g = 2.0 * a + 1.0 / np.sqrt(1.0 + a**2) + y
        if np.all(np.abs(g) <= _ROOT_TOL):
            break
        lo = np.where(g < 0, a, lo)
        hi = np.where(g > 0, a, hi)
        dg = 2.0 - a / (1.0 + a**2) ** 1.5
        step = a - g / dg
        outside = (step <= lo) | (step >= hi)
        a = np.where(outside, 0.5 * (lo + hi), step)
    else:
        raise LambdaRootFindError("asinh-cost root-find did not reach 1e-10")
    return a[:, None]


def _custom_newton(cost: CostSpec, t: float, Y: np.ndarray) -> np.ndarray:
    """Damped Newton with finite-difference Jacobian and residual line search."""
    n, m = Y.shape
    A = np.zeros_like(Y)
    h = 1e-6
    for _ in range(_ROOT_MAXIT):
        G = cost.f1_grad(t, A) + Y
        if np.max(np.linalg.norm(G, axis=1)) <= _ROOT_TOL:
            return A
        J = np.empty((n, m, m))
        for c in range(m):
            Ah = A.copy()
            Ah[:, c] += h
            J[:, :, c] = (cost.f1_grad(t, Ah) - cost.f1_grad(t, A)) / h
        try:
            step = np.linalg.solve(J, -G[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise LambdaRootFindError("singular Jacobian in custom-cost Newton") from exc
        base = np.linalg.norm(G, axis=1)
        damp = np.ones(n)
        for _ in range(30):
            trial = A + damp[:, None] * step
            res = np.linalg.norm(cost.f1_grad(t, trial) + Y, axis=1)
            bad = res > (1.0 - 1e-4 * damp) * base
            if not np.any(bad):
                break
            damp = np.where(bad, damp / 2.0, damp)
        A = A + damp[:, None] * step
    raise LambdaRootFindError("custom-cost Newton did not reach 1e-10")


def lambda_min(cost: CostSpec, t: float, y) -> np.ndarray:
    """Minimizer of a -> f1(t, a) + a . y; residual below 1e-10."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not np.all(np.isfinite(y)):
        raise ValueError("y must be finite")
    return _lambda_batch(cost, t, y[None, :])[0]


def h1(cost: CostSpec, t: float, y) -> float:
    """Hamiltonian H1(t, y) = f1(t, Lambda) + Lambda . y (always <= 0)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    a = lambda_min(cost, t, y)
    return float(cost.f1_value(t, a[None, :])[0] + a @ y)


# ---------------------------------------------------------------------------
# Interaction drift and sensitivity functional
# ---------------------------------------------------------------------------

def _b_batch(spec: ProblemSpec, t: float, X: np.ndarray, law: ParticleCloud) -> np.ndarray:
    inter = spec.interaction
    if inter.kind == "none":
        return np.zeros_like(X)
    if inter.kind == "pairwise_quadratic":
        return -(X - law.mean())
    if inter.kind == "pairwise_potential":
        diffs = X[:, None, :] - law.points[None, :, :]
        grads = inter.grad_psi(diffs.reshape(-1, spec.dim)).reshape(diffs.shape)
        return -pmean(grads, axis=1)
    if inter.kind == "general":
        return np.atleast_2d(np.asarray(inter.b_fn(t, X, law), dtype=float))
    raise ValueError(f"unknown interaction kind {inter.kind!r}")


def drift_B(spec: ProblemSpec, t: float, x, y, law: ParticleCloud) -> np.ndarray:
    """Forward drift Lambda(t, y) + b(t, x, law)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return lambda_min(spec.cost, t, y) + _b_batch(spec, t, x[None, :], law)[0]


def _f_batch(spec: ProblemSpec, t: float, X: np.ndarray, Y: np.ndarray,
             joint: ParticleCloud) -> np.ndarray:
    """Sensitivity functional F(t, x, y, nu) for every (x, y) row.

    ``joint`` is a cloud of concatenated (x~, y~) pairs in R^{2m}.  For the
    pairwise kinds this is

        - avg_j[ Hess Psi(x - x~_j) y ] + avg_j[ Hess Psi(x~_j - x) y~_j ]

    plus the f2 terms; for the quadratic potential it reduces to the closed
    form -y + avg(y~).
    """
    m = spec.dim
    pts = joint.points
    if pts.shape[1] != 2 * m:
        raise ValueError("joint law must be a cloud of concatenated (x, y) pairs")
    Xt, Yt = pts[:, :m], pts[:, m:]
    inter = spec.interaction
    out = np.zeros_like(X)

    if inter.kind == "pairwise_quadratic":
        out = out - Y + pmean(Yt, axis=0)
    elif inter.kind == "pairwise_potential":
        dxy = X[:, None, :] - Xt[None, :, :]
        H_xy = inter.hess_psi(dxy.reshape(-1, m)).reshape(X.shape[0], Xt.shape[0], m, m)
        H_yx = inter.hess_psi((-dxy).reshape(-1, m)).reshape(X.shape[0], Xt.shape[0], m, m)
        own = pmean(H_xy, axis=1) @ Y[:, :, None]
        other = pmean(H_yx @ Yt[None, :, :, None], axis=1)
        out = out - own[:, :, 0] + other[:, :, 0]
    elif inter.kind == "general":
        law_x = ParticleCloud(Xt)
        Jx = np.asarray(inter.dx_b(t, X, law_x), dtype=float)
        own = np.einsum("nij,ni->nj", Jx, Y)
        Jm = np.asarray(inter.dmu_b(t, Xt, law_x, X), dtype=float)
        other = pmean(np.einsum("nkij,ki->nkj", Jm, Yt), axis=1)
        out = out + own + other
    elif inter.kind != "none":
        raise ValueError(f"unknown interaction kind {inter.kind!r}")

    f2 = spec.cost.f2
    if not f2.is_zero:
        law_x = ParticleCloud(Xt)
        out = out + np.asarray(f2.grad_x(t, X, law_x), dtype=float)
        ld = np.asarray(f2.lderiv(t, Xt, law_x, X), dtype=float)
        out = out + pmean(ld, axis=1)
    return out


def sensitivity_F(spec: ProblemSpec, t: float, x, y, law_xy: ParticleCloud) -> np.ndarray:
    """First-order sensitivity d_x H2 + avg d_mu H2 at a single (x, y)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return _f_batch(spec, t, x[None, :], y[None, :], law_xy)[0]


def running_cost(spec: ProblemSpec, t: float, x, a, law: ParticleCloud) -> float:
    """f(t, x, a, mu) = f1(t, a) + f2(t, x, mu)."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    total = float(spec.cost.f1_value(t, a[None, :])[0])
    if not spec.cost.f2.is_zero:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        total += float(np.asarray(spec.cost.f2.value(t, x[None, :], law))[0])
    return total
