"""Shared forward-backward ensemble engine.

Both the mean-field solver (law argument = the ensemble's own empirical
measure, terminal condition k * d_mu g) and the N-particle solver (same
self-law with terminal k * grad phi) run the Picard iteration implemented
here, as do the decoupled mean-field copies used by the chaos diagnostics
(law argument frozen to a reference flow).

One sweep is:

1. forward Euler-Maruyama with drift B(t, x, Yhat_j(x), law_j), where
   Yhat_j is the current regression representation of the adjoint flow and
   the Brownian increments are fixed once per solve (common random numbers,
   so the sweep map is deterministic);
2. backward pass: Y_M = terminal(cloud_M), then for j = M-1..0 a
   least-squares regression of Y_{j+1} + F(t_j, X_j, Y_{j+1}, joint_j) * dt
   on the feature basis at X_j (explicit in both the pointwise y and the law
   argument, an O(dt) bias controlled by grid refinement);
3. an Anderson-accelerated damped update of the stacked regression
   coefficients, until the coupled (X, Y) flow moves less than ``tol`` in
   the synchronous-coupling bound on the sup-node W1 distance.

Structurally decoupled instances (no interaction, measure-free f2 and a
measure-free terminal gradient) are solved particle by particle so the
discrete scheme inherits the exact factorization of the continuous system.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from ._util import lexsorted_lstsq, pmean, rng_from
from .measures import MeasureSpec, ParticleCloud, sample
from .model import ProblemSpec, _b_batch, _f_batch, _lambda_batch

__all__ = [
    "TimeGrid",
    "SolverConfig",
    "NoiseBank",
    "FrozenFlow",
    "FbsdeSolution",
    "SolverDivergenceError",
    "NonFiniteStateError",
    "solve_ensemble",
]


class SolverDivergenceError(RuntimeError):
    """Picard residual grew for ``divergence_patience`` consecutive sweeps."""

    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = list(residuals)


class NonFiniteStateError(RuntimeError):
    """A particle state left the finite range; carries the first bad node."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_M = T."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.horizon <= 0 or self.steps < 2:
            raise ValueError("need horizon > 0 and at least 2 steps")
        object.__setattr__(self, "_nodes",
                           np.linspace(0.0, self.horizon, self.steps + 1))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self._nodes

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    max_picard: int = 150
    damping: float = 0.5
    basis_degree: int = 3
    min_particles: int = 64
    stiff_threshold: float = 0.5
    divergence_patience: int = 8
    anderson_window: int = 8


@dataclass(frozen=True)
class NoiseBank:
    """Seeded initial conditions and unit Brownian increments.

    Regeneration from ``(seed, n, steps, d)`` and the initial law is
    bit-exact; the engine scales the unit normals by sqrt(dt), so one bank
    serves any horizon with the same step count.
    """

    seed: int
    n: int
    steps: int
    d: int
    x0: np.ndarray
    normals: np.ndarray

    @classmethod
    def build(cls, seed: int, n: int, steps: int, d: int,
              mu_in: MeasureSpec, *path: int) -> "NoiseBank":
        x0 = sample(mu_in, n, _path_seed(seed, *path, 1)).points
        normals = rng_from(seed, *path, 2).standard_normal((n, steps, d))
        return cls(int(seed), int(n), int(steps), int(d), x0, normals)

    @property
    def bank_id(self) -> str:
        return f"noise(seed={self.seed},n={self.n},steps={self.steps},d={self.d})"

    def rows(self, idx) -> "NoiseBank":
        idx = np.atleast_1d(idx)
        return NoiseBank(self.seed, len(idx), self.steps, self.d,
                         self.x0[idx], self.normals[idx])


def _path_seed(seed: int, *path: int) -> int:
    # fold a stream path into a single integer seed for measures.sample
    return int(np.random.SeedSequence(entropy=int(seed),
                                      spawn_key=tuple(path)).generate_state(1)[0])


@dataclass(frozen=True)
class FrozenFlow:
    """Reference law flow: per-node clouds of X and of (X, Y) jointly."""

    x_clouds: tuple
    xy_clouds: tuple

    @classmethod
    def from_solution(cls, sol: "FbsdeSolution") -> "FrozenFlow":
        return cls(tuple(sol.x_cloud(j) for j in range(sol.nodes)),
                   tuple(sol.xy_cloud(j) for j in range(sol.nodes)))


# ---------------------------------------------------------------------------
# regression basis
# ---------------------------------------------------------------------------

def _monomial_exponents(m: int, degree: int) -> list[tuple]:
    exps = []
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(m), d):
            e = [0] * m
            for c in combo:
                e[c] += 1
            exps.append(tuple(e))
    return sorted(set(exps), key=lambda e: (sum(e), e))


class Basis:
    """Constant + state monomials + penalty-supplied scalar features."""

    def __init__(self, dim: int, degree: int, extra: tuple = ()):
        self.exponents = _monomial_exponents(dim, degree)
        self.extra = tuple(extra)
        self.size = 1 + len(self.exponents) + len(self.extra)

    def eval(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        n, m = X.shape
        max_pow = max((max(e) for e in self.exponents), default=0)
        powers = [np.ones((n, m))]
        for _ in range(max_pow):
            powers.append(powers[-1] * X)
        out = np.empty((n, self.size))
        out[:, 0] = 1.0
        for col, e in enumerate(self.exponents, start=1):
            acc = None
            for c, p in enumerate(e):
                if p:
                    acc = powers[p][:, c] if acc is None else acc * powers[p][:, c]
            out[:, col] = acc
        for off, f in enumerate(self.extra, start=1 + len(self.exponents)):
            out[:, off] = np.asarray(f(X), dtype=float).reshape(-1)
        return out


@dataclass(frozen=True)
class FlowCoeffs:
    """Regression representation of the adjoint flow.

    ``theta`` holds per-node coefficients; ``lo``/``hi`` the componentwise
    range of the fitting sample.  Evaluation clips the state to that range,
    the usual least-squares Monte Carlo truncation: the true adjoint is
    bounded, so extrapolating the polynomial outside the sample support
    would only inject spurious growth.
    """

    theta: np.ndarray  # (M, B, m)
    lo: np.ndarray     # (M, m)
    hi: np.ndarray     # (M, m)

    @classmethod
    def zero(cls, steps: int, basis_size: int, dim: int) -> "FlowCoeffs":
        return cls(np.zeros((steps, basis_size, dim)),
                   np.full((steps, dim), -np.inf), np.full((steps, dim), np.inf))

    def with_theta(self, theta: np.ndarray) -> "FlowCoeffs":
        return FlowCoeffs(theta.reshape(self.theta.shape), self.lo, self.hi)

    def evaluate(self, basis: Basis, j: int, X: np.ndarray) -> np.ndarray:
        Xc = np.clip(X, self.lo[j], self.hi[j])
        return basis.eval(Xc) @ self.theta[j]


# ---------------------------------------------------------------------------
# Anderson-accelerated damped fixed point on the coefficient stack
# ---------------------------------------------------------------------------

class _Anderson:
    """Type-II Anderson acceleration with damped-step fallback."""

    def __init__(self, window: int, damping: float):
        self.window = max(1, window)
        self.damping = damping
        self.us: list[np.ndarray] = []
        self.rs: list[np.ndarray] = []

    def reset(self):
        self.us.clear()
        self.rs.clear()

    def step(self, u: np.ndarray, g: np.ndarray) -> np.ndarray:
        r = g - u
        self.us.append(u.copy())
        self.rs.append(r.copy())
        if len(self.us) > self.window:
            self.us.pop(0)
            self.rs.pop(0)
        beta = self.damping
        if len(self.us) == 1:
            return u + beta * r
        dU = np.stack([self.us[i + 1] - self.us[i] for i in range(len(self.us) - 1)], axis=1)
        dR = np.stack([self.rs[i + 1] - self.rs[i] for i in range(len(self.rs) - 1)], axis=1)
        try:
            gamma, _, _, _ = np.linalg.lstsq(dR, r, rcond=None)
        except np.linalg.LinAlgError:
            return u + beta * r
        if not np.all(np.isfinite(gamma)) or np.linalg.norm(gamma) > 1e4:
            return u + beta * r
        return u + beta * r - (dU + beta * dR) @ gamma


# ---------------------------------------------------------------------------
# solution container
# ---------------------------------------------------------------------------

@dataclass
class FbsdeSolution:
    """Discretized (X, Y, Z) ensemble with its law flow and control.

    ``X`` and ``Y`` are (n, M+1, m); ``Z`` is the (n, M, m, d) regression
    estimate (diagnostic only, it never feeds the iteration).  The stored
    increments satisfy the forward recursion exactly with the stored Y and
    the terminal row equals the terminal map evaluated on the final cloud.
    """

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    control: np.ndarray
    grid: TimeGrid
    picard_residuals: list
    converged: bool
    events: list
    noise_bank_id: str
    coeffs: np.ndarray
    basis: Basis

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def nodes(self) -> int:
        return self.X.shape[1]

    def x_cloud(self, j: int) -> ParticleCloud:
        return ParticleCloud(self.X[:, j, :])

    def xy_cloud(self, j: int) -> ParticleCloud:
        return ParticleCloud(np.concatenate([self.X[:, j, :], self.Y[:, j, :]], axis=1))


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

# states beyond this magnitude are treated as a diverged sweep
_STATE_CAP = 1e8


def _forward_pass(spec, grid, noise, basis, flow, law_flow, terminal_values):
    n = noise.n
    m = spec.dim
    M = grid.steps
    dt = grid.dt
    sqdt = np.sqrt(dt)
    sigma_t = spec.sigma.T
    X = np.empty((n, M + 1, m))
    Y = np.empty((n, M + 1, m))
    X[:, 0] = noise.x0
    for j in range(M):
        Y[:, j] = flow.evaluate(basis, j, X[:, j])
        law = law_flow(j, X[:, j])
        drift = _lambda_batch(spec.cost, grid.nodes[j], Y[:, j]) \
            + _b_batch(spec, grid.nodes[j], X[:, j], law)
        X[:, j + 1] = X[:, j] + drift * dt + (noise.normals[:, j] * sqdt) @ sigma_t
        if not np.all(np.isfinite(X[:, j + 1])) or np.max(np.abs(X[:, j + 1])) > _STATE_CAP:
            raise NonFiniteStateError(f"non-finite state at node {j + 1}")
    Y[:, M] = terminal_values(ParticleCloud(X[:, M]))
    if not np.all(np.isfinite(Y)):
        bad = next(j for j in range(M + 1) if not np.all(np.isfinite(Y[:, j])))
        raise NonFiniteStateError(f"non-finite adjoint at node {bad}")
    return X, Y


def _backward_pass(spec, grid, basis, X, Y_terminal, joint_flow):
    n, m = X.shape[0], spec.dim
    M = grid.steps
    dt = grid.dt
    theta = np.zeros((M, basis.size, m))
    lo = np.empty((M, m))
    hi = np.empty((M, m))
    y_next = Y_terminal
    for j in reversed(range(M)):
        joint = joint_flow(j, X[:, j], y_next)
        f_val = _f_batch(spec, grid.nodes[j], X[:, j], y_next, joint)
        target = y_next + dt * f_val
        feats = basis.eval(X[:, j])
        theta[j] = lexsorted_lstsq(feats, target)
        lo[j] = X[:, j].min(axis=0)
        hi[j] = X[:, j].max(axis=0)
        y_next = feats @ theta[j]
    return FlowCoeffs(theta, lo, hi)


def solve_ensemble(spec: ProblemSpec, grid: TimeGrid, noise: NoiseBank,
                   terminal_values: Callable[[ParticleCloud], np.ndarray],
                   cfg: SolverConfig, *,
                   terminal_law_free: bool = False,
                   frozen: Optional[FrozenFlow] = None,
                   extra_features: tuple = (),
                   init_coeffs: Optional[np.ndarray] = None,
                   allow_decoupled: bool = True) -> FbsdeSolution:
    """Run the Picard iteration; see the module docstring for the scheme."""
    n = noise.n
    if noise.steps != grid.steps:
        raise ValueError("noise bank and time grid disagree on the step count")

    decoupled = (allow_decoupled and frozen is None and n > 1
                 and spec.decouples and terminal_law_free)
    if decoupled:
        return _solve_decoupled(spec, grid, noise, terminal_values, cfg,
                                extra_features=extra_features)

    basis = Basis(spec.dim, cfg.basis_degree, extra_features)
    if frozen is None:
        law_flow = lambda j, Xj: ParticleCloud(Xj)
        joint_flow = lambda j, Xj, Yj: ParticleCloud(np.concatenate([Xj, Yj], axis=1))
    else:
        law_flow = lambda j, Xj: frozen.x_clouds[j]
        joint_flow = lambda j, Xj, Yj: frozen.xy_clouds[j]

    if init_coeffs is None:
        flow = FlowCoeffs.zero(grid.steps, basis.size, spec.dim)
    else:
        flow = init_coeffs
        if flow.theta.shape != (grid.steps, basis.size, spec.dim):
            flow = FlowCoeffs.zero(grid.steps, basis.size, spec.dim)

    accel = _Anderson(cfg.anderson_window, cfg.damping)
    residuals: list[float] = []
    events: list[str] = []
    prev = None
    prev_flow = None
    converged = False
    grow = 0
    recoveries = 0
    X = Y = None
    sweep = 0
    while sweep < cfg.max_picard:
        sweep += 1
        try:
            X, Y = _forward_pass(spec, grid, noise, basis, flow, law_flow,
                                 terminal_values)
        except NonFiniteStateError:
            # the accelerated step overshot: bisect back toward the last
            # flow that produced finite paths and restart the acceleration
            if prev_flow is None or recoveries >= 12:
                raise
            recoveries += 1
            accel.reset()
            events.append(f"recovered from non-finite sweep {sweep}")
            flow = prev_flow.with_theta(0.5 * (flow.theta + prev_flow.theta))
            continue
        if prev is not None:
            dX, dY = X - prev[0], Y - prev[1]
            per_node = pmean(np.sqrt(np.sum(dX**2, axis=2) + np.sum(dY**2, axis=2)), axis=0)
            res = float(np.max(per_node))
            residuals.append(res)
            if res < cfg.tol:
                converged = True
                break
            if len(residuals) > 1 and res > residuals[-2]:
                grow += 1
                if grow == max(2, cfg.divergence_patience // 2):
                    accel.reset()
                    events.append(f"anderson reset at sweep {sweep}")
                if grow >= cfg.divergence_patience and res > 10.0 * min(residuals):
                    raise SolverDivergenceError(
                        f"residual grew {grow} sweeps in a row (last {res:.3e})",
                        residuals)
            else:
                grow = 0
        prev = (X, Y)
        prev_flow = flow
        try:
            raw = _backward_pass(spec, grid, basis, X, Y[:, grid.steps], joint_flow)
        except np.linalg.LinAlgError:
            if recoveries >= 12:
                raise SolverDivergenceError("regression became degenerate", residuals)
            recoveries += 1
            accel.reset()
            events.append(f"recovered from degenerate regression at sweep {sweep}")
            flow = flow.with_theta(0.5 * flow.theta)
            continue
        mixed = accel.step(flow.theta.ravel(), raw.theta.ravel())
        # trust region: cap the coefficient step so transient sweeps cannot
        # blow up through the state polynomial before the acceleration has
        # built its subspace
        delta = mixed - flow.theta.ravel()
        cap = 4.0 * (1.0 + float(np.linalg.norm(flow.theta)))
        norm = float(np.linalg.norm(delta))
        if norm > cap:
            mixed = flow.theta.ravel() + delta * (cap / norm)
        flow = raw.with_theta(mixed)

    return FbsdeSolution(
        X=X, Y=Y, Z=np.zeros((n, grid.steps, spec.dim, spec.noise_dim)),
        control=_control_from(spec, grid, Y),
        grid=grid, picard_residuals=residuals, converged=converged,
        events=events, noise_bank_id=noise.bank_id, coeffs=flow, basis=basis)


def _solve_decoupled(spec, grid, noise, terminal_values, cfg, *, extra_features):
    """Particle-by-particle solve for structurally independent systems.

    Each particle is an independent single-particle run on its own noise
    rows, so the ensemble factorizes bit-exactly (acceptance criterion for
    interaction-free instances).
    """
    singles = [solve_ensemble(spec, grid, noise.rows([i]), terminal_values, cfg,
                              terminal_law_free=True, extra_features=extra_features,
                              allow_decoupled=False)
               for i in range(noise.n)]
    X = np.concatenate([s.X for s in singles], axis=0)
    Y = np.concatenate([s.Y for s in singles], axis=0)
    Z = np.concatenate([s.Z for s in singles], axis=0)
    control = np.concatenate([s.control for s in singles], axis=0)
    residuals = [max(s.picard_residuals[min(i, len(s.picard_residuals) - 1)]
                     for s in singles if s.picard_residuals)
                 for i in range(max((len(s.picard_residuals) for s in singles), default=0))]
    sol = FbsdeSolution(
        X=X, Y=Y, Z=Z, control=control, grid=grid,
        picard_residuals=residuals,
        converged=all(s.converged for s in singles),
        events=["decoupled: solved particle-by-particle"],
        noise_bank_id=noise.bank_id,
        coeffs=None,
        basis=singles[0].basis)
    return sol


def forward_realization(spec: ProblemSpec, grid: TimeGrid, noise: NoiseBank,
                        flow: FlowCoeffs, basis: Basis, terminal_values,
                        frozen: Optional[FrozenFlow] = None):
    """Single forward pass under a fixed adjoint flow.

    Used to realize a solution whose terminal row is evaluated through an
    exact (possibly law-coupled) terminal map after the flow itself has been
    fixed by an outer solver.
    """
    if frozen is None:
        law_flow = lambda j, Xj: ParticleCloud(Xj)
    else:
        law_flow = lambda j, Xj: frozen.x_clouds[j]
    return _forward_pass(spec, grid, noise, basis, flow, law_flow, terminal_values)


def _control_from(spec, grid, Y):
    n, nodes, m = Y.shape
    control = np.empty((n, grid.steps, m))
    for j in range(grid.steps):
        control[:, j] = _lambda_batch(spec.cost, grid.nodes[j], Y[:, j])
    return control


def estimate_Z(sol: FbsdeSolution, spec: ProblemSpec, noise: NoiseBank) -> np.ndarray:
    """Post-hoc regression estimate Z_j ~ E[(Y_{j+1} - Y_j) dW_j^T / dt | X_j].

    Diagnostic only: it feeds the martingale test, never the iteration.
    """
    grid = sol.grid
    dt = grid.dt
    n, m = sol.n, spec.dim
    d = spec.noise_dim
    Z = np.empty((n, grid.steps, m, d))
    for j in range(grid.steps):
        dW = noise.normals[:, j] * np.sqrt(dt)
        incr = sol.Y[:, j + 1] - sol.Y[:, j]
        target = (incr[:, :, None] * dW[:, None, :]).reshape(n, m * d) / dt
        feats = sol.basis.eval(sol.X[:, j])
        coeff = lexsorted_lstsq(feats, target)
        Z[:, j] = (feats @ coeff).reshape(n, m, d)
    return Z
