"""Independent brute-force references.

The solvers are particle FBSDE methods; the references here are
algorithmically disjoint so agreement is evidence rather than tautology:

* :func:`grid_sinkhorn_bridge` solves the 1-D no-interaction entropic case
  by matrix scaling of the heat-kernel Gibbs matrix on a spatial lattice and
  propagates interior marginals through the entropic potentials;
* :func:`dp_entropic_value` solves the same instance by maximizing the
  terminal-potential dual, where each evaluation is an exact backward value
  recursion (dynamic programming) over the grid x time lattice;
* :func:`mean_steer_shooting` integrates the two-point boundary ODE of the
  scalar mean-steering problem by shooting;
* :func:`finite_diff_check` is a central-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, minimize
from scipy.special import ndtr

from .measures import MeasureSpec

__all__ = [
    "GridBridge",
    "SinkhornError",
    "grid_sinkhorn_bridge",
    "dp_entropic_value",
    "mean_steer_shooting",
    "mean_steer_closed_form",
    "finite_diff_check",
]


class SinkhornError(RuntimeError):
    """Matrix scaling failed to reach the marginal tolerance."""


def _cdf_1d(spec: MeasureSpec, x: np.ndarray) -> np.ndarray:
    if spec.dim != 1:
        raise ValueError("grid oracle supports 1-D laws only")
    if spec.kind == "gaussian":
        mu = float(spec.params["mean"][0])
        sd = float(np.sqrt(spec.params["cov"][0, 0]))
        return ndtr((x - mu) / sd)
    if spec.kind == "gaussian_mixture":
        out = np.zeros_like(x)
        for w, mu, cov in spec.params["components"]:
            out += w * ndtr((x - float(mu[0])) / float(np.sqrt(cov[0, 0])))
        return out
    if spec.kind == "uniform_box":
        lo, hi = float(spec.params["lo"][0]), float(spec.params["hi"][0])
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    if spec.kind == "empirical":
        pts = np.sort(spec.load_points()[:, 0])
        return np.searchsorted(pts, x, side="right") / pts.size
    raise ValueError(f"unknown measure kind {spec.kind!r}")


def _range_1d(spec: MeasureSpec, pad: float) -> tuple[float, float]:
    if spec.kind == "gaussian":
        mu = float(spec.params["mean"][0])
        sd = float(np.sqrt(spec.params["cov"][0, 0]))
        return mu - pad * sd, mu + pad * sd
    if spec.kind == "gaussian_mixture":
        los, his = zip(*[(float(mu[0]) - pad * float(np.sqrt(c[0, 0])),
                          float(mu[0]) + pad * float(np.sqrt(c[0, 0])))
                         for _, mu, c in spec.params["components"]])
        return min(los), max(his)
    if spec.kind == "uniform_box":
        return float(spec.params["lo"][0]), float(spec.params["hi"][0])
    pts = spec.load_points()[:, 0]
    return float(pts.min()), float(pts.max())


def _discretize(spec: MeasureSpec, edges: np.ndarray) -> np.ndarray:
    cdf = _cdf_1d(spec, edges)
    w = np.diff(cdf)
    total = w.sum()
    if total <= 0:
        raise ValueError("grid does not cover the support of the law")
    return w / total


@dataclass
class GridBridge:
    """Discrete 1-D bridge: lattice, per-node marginals and the value."""

    grid_x: np.ndarray
    times: np.ndarray
    marginals: np.ndarray  # (M+1, G), rows sum to 1
    value: float
    potentials: tuple
    dual_trace: list

    def marginal(self, j: int) -> np.ndarray:
        return self.marginals[j]


def _heat_matrix(x: np.ndarray, variance: float) -> np.ndarray:
    diff = x[:, None] - x[None, :]
    K = np.exp(-0.5 * diff**2 / variance)
    return K / K.sum(axis=1, keepdims=True)


def grid_sinkhorn_bridge(mu_in: MeasureSpec, mu_fin: MeasureSpec, T: float,
                         sigma: float, G: int, M: int,
                         sinkhorn_tol: float = 1e-10, max_iter: int = 20000,
                         pad: float = 4.5) -> GridBridge:
    """Classical Schrodinger bridge on a 1-D lattice by Sinkhorn scaling.

    Static reduction: minimize KL(pi | mu_in x heat_{sigma^2 T}) over
    couplings of the discretized marginals; the entropic value is sigma^2
    times the optimal KL.  Interior marginals follow from the scaled
    potentials through the heat semigroup, so the endpoint marginals match
    the inputs by construction.  The Sinkhorn dual is block-coordinate
    ascent, hence monotone; the trace is asserted nondecreasing.
    """
    sigma = float(sigma)
    if sigma == 0:
        raise ValueError("sigma must be nonzero")
    lo = min(_range_1d(mu_in, pad)[0], _range_1d(mu_fin, pad)[0]) - abs(sigma) * np.sqrt(T)
    hi = max(_range_1d(mu_in, pad)[1], _range_1d(mu_fin, pad)[1]) + abs(sigma) * np.sqrt(T)
    edges = np.linspace(lo, hi, G + 1)
    x = 0.5 * (edges[:-1] + edges[1:])
    a = _discretize(mu_in, edges)
    b = _discretize(mu_fin, edges)

    R = a[:, None] * _heat_matrix(x, sigma**2 * T)  # reference coupling
    u = np.ones(G)
    v = np.ones(G)
    dual_trace = []
    err = np.inf
    for _ in range(max_iter):
        Rv = R @ v
        u = a / np.where(Rv > 0, Rv, 1.0)
        Ru = R.T @ u
        v = b / np.where(Ru > 0, Ru, 1.0)
        pi_col = R.T @ u * v
        err = float(np.abs(pi_col - b).sum() + np.abs((R @ v) * u - a).sum())
        with np.errstate(divide="ignore"):
            dual = float(a @ np.where(u > 0, np.log(u), 0.0)
                         + b @ np.where(v > 0, np.log(v), 0.0)
                         - u @ R @ v + 1.0)
        if dual_trace and dual < dual_trace[-1] - 1e-9:
            raise SinkhornError("dual objective decreased; scaling is unstable")
        dual_trace.append(dual)
        if err < sinkhorn_tol:
            break
    else:
        raise SinkhornError(
            f"marginal error {err:.3e} after {max_iter} iterations "
            "(grid too coarse or sigma too small)")

    pi = u[:, None] * R * v[None, :]
    mask = pi > 0
    value = sigma**2 * float(np.sum(pi[mask] * np.log(pi[mask] / R[mask])))

    # interior marginals via the potentials and the heat semigroup
    times = np.linspace(0.0, T, M + 1)
    marginals = np.empty((M + 1, G))
    f_pot = u * a  # row potential absorbed into the reference marginal
    for l, t in enumerate(times):
        if t <= 0:
            rho = f_pot * (_heat_matrix(x, sigma**2 * T) @ v)
        elif t >= T:
            rho = (_heat_matrix(x, sigma**2 * T).T @ f_pot) * v
        else:
            left = _heat_matrix(x, sigma**2 * t)
            right = _heat_matrix(x, sigma**2 * (T - t))
            rho = (left.T @ f_pot) * (right @ v)
        total = rho.sum()
        if total <= 0 or not np.isfinite(total):
            raise SinkhornError(f"degenerate interior marginal at node {l}")
        marginals[l] = rho / total
    if np.abs(marginals[0] - a).sum() > 1e-8 or np.abs(marginals[M] - b).sum() > 1e-8:
        raise SinkhornError("endpoint marginals drifted from the inputs")
    return GridBridge(grid_x=x, times=times, marginals=marginals, value=value,
                      potentials=(u, v), dual_trace=dual_trace)


def dp_entropic_value(bridge: GridBridge, mu_in: MeasureSpec, mu_fin: MeasureSpec,
                      T: float, sigma: float, steps: int = 8,
                      maxiter: int = 500) -> float:
    """Entropic value by dynamic programming over the grid x time lattice.

    Maximizes over terminal potentials psi the Lagrangian
    mu_fin(psi) + inf_alpha E[ integral f1 - psi(X_T) ]; the inner infimum is
    computed exactly by the backward log-sum-exp value recursion of the
    linearly solvable control problem, and the gradient in psi is the
    terminal marginal of the optimally tilted chain.  Independent of the
    Sinkhorn scaling path.
    """
    x = bridge.grid_x
    edges = np.concatenate([[x[0] - (x[1] - x[0]) / 2],
                            0.5 * (x[1:] + x[:-1]),
                            [x[-1] + (x[-1] - x[-2]) / 2]])
    a = _discretize(mu_in, edges)
    b = _discretize(mu_fin, edges)
    s2 = float(sigma) ** 2
    P = _heat_matrix(x, s2 * T / steps)
    logP = np.log(np.where(P > 0, P, 1e-300))

    def negobj(psi):
        w = -psi
        Qs = []
        for _ in range(steps):
            z = logP + (-w / s2)[None, :]
            zmax = z.max(axis=1, keepdims=True)
            lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
            Q = np.exp(z - zmax - np.log(np.exp(z - zmax).sum(axis=1))[:, None])
            Qs.append(Q)
            w = -s2 * lse
        rho = a.copy()
        for Q in reversed(Qs):
            rho = rho @ Q
        val = b @ psi + a @ w
        grad = b - rho
        return -val, -grad

    res = minimize(negobj, np.zeros(x.size), jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "ftol": 1e-14, "gtol": 1e-10})
    return float(-res.fun)


def mean_steer_shooting(mean_in: float, target_mean: float, k: float,
                        T: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Two-point boundary ODE for deterministic mean steering, by shooting.

    Minimizes integral of c(t)^2/2 plus k (x(T) - target)^2 for dx = c dt.
    The adjoint is constant along the flow, so the shooting residual
    r(y0) = y0 - 2 k (x(T; y0) - target) is scalar; it is bracketed and
    solved with Brent's method, integrating x with an ODE solver.  Returns
    (value, times, control path); the optimal control is -y0.
    """
    if T <= 0 or k < 0:
        raise ValueError("need T > 0 and k >= 0")
    delta = target_mean - mean_in

    def terminal_x(y0: float) -> float:
        rhs = lambda t, z: [-y0]
        out = solve_ivp(rhs, (0.0, T), [mean_in], rtol=1e-12, atol=1e-12)
        return float(out.y[0, -1])

    def residual(y0: float) -> float:
        return y0 - 2.0 * k * (terminal_x(y0) - target_mean)

    scale = max(1.0, 4.0 * k * abs(delta))
    lo, hi = -scale, scale
    for _ in range(60):
        if residual(lo) * residual(hi) <= 0:
            break
        lo *= 2.0
        hi *= 2.0
    else:
        raise RuntimeError("shooting bracket not found")
    y0 = brentq(residual, lo, hi, xtol=1e-14, rtol=1e-15)
    times = np.linspace(0.0, T, 101)
    control = np.full_like(times, -y0)
    xT = terminal_x(y0)
    value = 0.5 * y0**2 * T + k * (xT - target_mean) ** 2
    return value, times, control


def mean_steer_closed_form(mean_in: float, target_mean: float, k: float,
                           T: float) -> float:
    """min_c [T c^2 / 2 + k (mean_in + cT - target)^2], evaluated exactly."""
    delta = target_mean - mean_in
    c = 2.0 * k * delta / (1.0 + 2.0 * k * T)
    return 0.5 * T * c**2 + k * (delta - c * T) ** 2


def finite_diff_check(f, grad, probes, h: float = 1e-5) -> float:
    """Max relative error of ``grad`` against central differences at probes."""
    if h <= 0:
        raise ValueError("h must be positive")
    worst = 0.0
    for x in np.atleast_2d(np.asarray(probes, dtype=float)):
        g = np.atleast_1d(np.asarray(grad(x), dtype=float))
        fd = np.empty_like(g)
        for c in range(x.size):
            e = np.zeros_like(x)
            e[c] = h
            fd[c] = (f(x + e) - f(x - e)) / (2.0 * h)
        denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(np.linalg.norm(g - fd) / denom))
    return worst
