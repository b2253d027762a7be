"""Quantitative propagation-of-chaos and duality diagnostics.

``synchronous_coupling_error`` drives the N-particle system and N decoupled
mean-field copies with the same Brownian rows and measures the pathwise H^2
discrepancy against the epsilon functional (the time integral of the squared
W1 distance between the copies' empirical joint law and a frozen reference
law flow).  The i.i.d. copies are realized by one high-resolution mean-field
solve whose law flow is frozen and then integrated per noise row; the
reference size is a knob, reported in the output.

``martingale_test`` checks the increment orthogonality of the compensated
adjoint along a converged solution, and ``duality_checks`` sweeps a (k, phi)
grid to test the inner-sup representation of the weak penalized values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from ._util import fmt17, pmean
from .fbsde import (FbsdeSolution, FrozenFlow, NoiseBank, SolverConfig, TimeGrid,
                    solve_ensemble)
from .measures import ParticleCloud, sample, wasserstein_info
from .mkv_solver import estimate_value, solve_mkv_fbsde
from .model import ProblemSpec, _f_batch
from .particle_solver import (NParticleSolution, _phi_terminal, _scalar_features,
                              nparticle_value, solve_nparticle_fbsde)
from .penalty import PenaltySpec, PhiFamily

__all__ = [
    "ChaosRow",
    "ChaosReport",
    "MartingaleReport",
    "DualityCell",
    "DualityReport",
    "epsilon_n",
    "synchronous_coupling_error",
    "martingale_test",
    "duality_checks",
]


# ---------------------------------------------------------------------------
# epsilon functional
# ---------------------------------------------------------------------------

def epsilon_n(joint_clouds, reference_clouds, grid: TimeGrid, *,
              seed: int = 0) -> tuple[float, str]:
    """Left-endpoint quadrature of W1^2 between per-node joint clouds and a
    reference flow.  Returns (value, W1 mode used)."""
    joint_clouds = list(joint_clouds)
    reference_clouds = list(reference_clouds)
    if len(joint_clouds) != len(reference_clouds) or len(joint_clouds) != grid.steps + 1:
        raise ValueError("node counts of the two flows and the grid must match")
    total = 0.0
    mode = ""
    for j in range(grid.steps):
        w1, mode = wasserstein_info(1, joint_clouds[j], reference_clouds[j], seed=seed)
        total += w1**2 * grid.dt
    return float(total), mode


# ---------------------------------------------------------------------------
# synchronous coupling
# ---------------------------------------------------------------------------

@dataclass
class ChaosRow:
    N: int
    h2_error: float
    epsilon: float
    ratio: float
    converged: bool
    error: str = ""


@dataclass
class ChaosReport:
    rows: list
    slope_loglog: float
    ratio_spearman: float
    n_ref: int
    w1_mode: str

    CSV_HEADER = "N,h2_error,epsilon,ratio,converged,error"

    def csv_rows(self):
        for r in self.rows:
            yield ",".join([str(r.N), fmt17(r.h2_error), fmt17(r.epsilon),
                            fmt17(r.ratio), str(int(r.converged)), r.error])

    def to_dict(self) -> dict:
        return {"rows": [vars(r).copy() for r in self.rows],
                "slope_loglog": self.slope_loglog,
                "ratio_spearman": self.ratio_spearman,
                "n_ref": self.n_ref, "w1_mode": self.w1_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "ChaosReport":
        return cls(rows=[ChaosRow(**r) for r in d["rows"]],
                   slope_loglog=d["slope_loglog"],
                   ratio_spearman=d["ratio_spearman"],
                   n_ref=d["n_ref"], w1_mode=d["w1_mode"])


def _h2_error(Xa, Ya, Xb, Yb, dt: float) -> float:
    """mean_i [ sup_j ||dX_{i,j}||^2 + sum_{j<M} ||dY_{i,j}||^2 dt ]."""
    dX = Xa - Xb
    dY = Ya - Yb
    sup_x = np.max(np.sum(dX**2, axis=2), axis=1)
    int_y = np.sum(np.sum(dY[:, :-1, :] ** 2, axis=2), axis=1) * dt
    return float(pmean(sup_x + int_y))


def synchronous_coupling_error(spec: ProblemSpec, k: float, phi, N_list,
                               grid: TimeGrid, cfg: SolverConfig, seed: int,
                               *, n_ref: int | None = None) -> ChaosReport:
    """Coupling error between the N-particle system and mean-field copies.

    For each N a fresh noise bank drives both the N-particle solve and N
    decoupled copies of the mean-field FBSDE (law flow frozen from a
    reference solve at ``n_ref``, default 4 * max(N_list)).  Per-N solver
    failures are recorded without aborting the sweep.
    """
    N_list = list(N_list)
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be strictly increasing")
    if n_ref is None:
        n_ref = 4 * max(N_list)

    target = sample(spec.mu_fin, n_ref, seed)
    penalty = PenaltySpec.convex_dual(phi, target)
    ref = solve_mkv_fbsde(spec, k, penalty, grid, n_ref, cfg, seed,
                          auto_refine=False)
    frozen = FrozenFlow.from_solution(ref)

    rows = []
    mode = ""
    for idx, N in enumerate(N_list):
        bank = NoiseBank.build(seed, N, grid.steps, spec.noise_dim, spec.mu_in,
                               0xA0 + idx)
        try:
            nsol = solve_nparticle_fbsde(spec, k, phi, N, grid, cfg, bank)
            copies = solve_ensemble(spec, grid, bank, _phi_terminal(k, phi), cfg,
                                    terminal_law_free=True, frozen=frozen,
                                    extra_features=tuple(_scalar_features(phi)),
                                    allow_decoupled=False)
            h2 = _h2_error(nsol.X, nsol.Y, copies.X, copies.Y, grid.dt)
            cop_clouds = [ParticleCloud(np.concatenate(
                [copies.X[:, j], copies.Y[:, j]], axis=1))
                for j in range(grid.steps + 1)]
            ref_clouds = [ref.xy_cloud(j) for j in range(grid.steps + 1)]
            eps, mode = epsilon_n(cop_clouds, ref_clouds, grid, seed=seed)
            rows.append(ChaosRow(N=N, h2_error=h2, epsilon=eps,
                                 ratio=h2 / eps if eps > 0 else np.nan,
                                 converged=nsol.converged and copies.converged))
        except RuntimeError as exc:
            rows.append(ChaosRow(N=N, h2_error=np.nan, epsilon=np.nan,
                                 ratio=np.nan, converged=False, error=str(exc)))

    ok = [r for r in rows if not r.error and r.h2_error > 0]
    slope = float("nan")
    if len(ok) >= 2:
        slope = float(np.polyfit(np.log([r.N for r in ok]),
                                 np.log([r.h2_error for r in ok]), 1)[0])
    rho = float("nan")
    ratios = [r.ratio for r in ok if np.isfinite(r.ratio)]
    if len(ratios) >= 3:
        rho = float(spearmanr(range(len(ratios)), ratios).statistic)
    return ChaosReport(rows=rows, slope_loglog=slope, ratio_spearman=rho,
                       n_ref=n_ref, w1_mode=mode)


# ---------------------------------------------------------------------------
# martingale test
# ---------------------------------------------------------------------------

@dataclass
class MartingaleReport:
    correlations: dict
    max_abs_correlation: float
    threshold: float
    passed: bool

    def to_dict(self) -> dict:
        return {"correlations": dict(self.correlations),
                "max_abs_correlation": self.max_abs_correlation,
                "threshold": self.threshold, "passed": self.passed}

    @classmethod
    def from_dict(cls, d: dict) -> "MartingaleReport":
        return cls(correlations=dict(d["correlations"]),
                   max_abs_correlation=d["max_abs_correlation"],
                   threshold=d["threshold"], passed=d["passed"])


def martingale_test(sol, spec: ProblemSpec, threshold: float | None = None) -> MartingaleReport:
    """Increment-orthogonality test of the compensated adjoint.

    Builds dMbar_j = Y_{j+1} - Y_j + F(t_j, X_j, Y_j, joint law_j) dt along
    the stored solution and reports, per feature of the past and per
    component, the pooled sample correlation with the increments.  The
    constant feature is scored as |mean| / std of the increments (capped at
    one), so deterministic drifts fail it.  Pass threshold defaults to
    3 / sqrt(n).
    """
    grid = sol.grid
    n = sol.X.shape[0]
    m = spec.dim
    dt = grid.dt
    if threshold is None:
        threshold = 3.0 / np.sqrt(n)

    incs = np.empty((n, grid.steps, m))
    feats: dict[str, list] = {
        "x": [], "y": [], "x^2": [], "y^2": [], "xy": [], "mean_x": [], "mean_y": []}
    for j in range(grid.steps):
        joint = ParticleCloud(np.concatenate([sol.X[:, j], sol.Y[:, j]], axis=1))
        f_val = _f_batch(spec, grid.nodes[j], sol.X[:, j], sol.Y[:, j], joint)
        incs[:, j] = sol.Y[:, j + 1] - sol.Y[:, j] + f_val * dt
        feats["x"].append(sol.X[:, j, 0])
        feats["y"].append(sol.Y[:, j, 0])
        feats["x^2"].append(sol.X[:, j, 0] ** 2)
        feats["y^2"].append(sol.Y[:, j, 0] ** 2)
        feats["xy"].append(sol.X[:, j, 0] * sol.Y[:, j, 0])
        feats["mean_x"].append(np.full(n, pmean(sol.X[:, j, 0])))
        feats["mean_y"].append(np.full(n, pmean(sol.Y[:, j, 0])))

    pooled = incs[:, :, 0].T.reshape(-1)  # first component, (j, i) pooled
    corrs: dict[str, float] = {}
    std = float(np.std(pooled))
    mean = float(np.mean(pooled))
    corrs["const"] = min(1.0, abs(mean) / std) if std > 0 else 1.0
    for name, cols in feats.items():
        f_pool = np.concatenate(cols)
        fs = float(np.std(f_pool))
        if fs == 0 or std == 0:
            corrs[name] = 1.0 if std == 0 else 0.0
            continue
        corrs[name] = float(np.corrcoef(f_pool, pooled)[0, 1])
    max_abs = max(abs(v) for v in corrs.values())
    return MartingaleReport(correlations=corrs, max_abs_correlation=max_abs,
                            threshold=float(threshold), passed=max_abs <= threshold)


# ---------------------------------------------------------------------------
# duality grid
# ---------------------------------------------------------------------------

@dataclass
class DualityCell:
    k: float
    phi_index: int  # -1 for the family-sup penalty
    system: str  # mean_field | mean_field_sup | n_particle
    N: int
    value: float
    std_error: float
    converged: bool
    error: str = ""


@dataclass
class DualityReport:
    cells: list
    inner_sup: dict
    violations: list

    CSV_HEADER = "k,phi_index,system,N,value,std_error,converged,error"

    def csv_rows(self):
        for c in self.cells:
            yield ",".join([fmt17(c.k), str(c.phi_index), c.system, str(c.N),
                            fmt17(c.value), fmt17(c.std_error),
                            str(int(c.converged)), c.error])

    def to_dict(self) -> dict:
        return {"cells": [vars(c).copy() for c in self.cells],
                "inner_sup": {str(k): v for k, v in self.inner_sup.items()},
                "violations": self.violations}

    @classmethod
    def from_dict(cls, d: dict) -> "DualityReport":
        return cls(cells=[DualityCell(**c) for c in d["cells"]],
                   inner_sup={float(k): v for k, v in d["inner_sup"].items()},
                   violations=[list(v) for v in d["violations"]])


def duality_checks(spec: ProblemSpec, ks, phi_family: PhiFamily, grid: TimeGrid,
                   n: int, N, cfg: SolverConfig, seed: int) -> DualityReport:
    """Solve the (k, phi) grid and flag duality violations beyond MC error.

    For each k the report holds one mean-field value per phi, one mean-field
    value for the family-sup penalty (the finite-family weak value, which
    must dominate every phi cell), and optionally N-particle values.  All
    mean-field cells share one noise bank (common random numbers), so the
    comparisons are coupled; violations are flagged beyond three times the
    root-sum-square of the cell errors.
    """
    ks = list(ks)
    if not ks or len(phi_family) == 0:
        raise ValueError("need nonempty ks and phi family")
    N_list = [] if N is None else ([N] if np.isscalar(N) else list(N))

    target = sample(spec.mu_fin, max(n, 512), seed)
    cells: list[DualityCell] = []
    inits: dict = {}
    for k in ks:
        for p_idx, phi in enumerate(phi_family):
            penalty = PenaltySpec.convex_dual(phi, target)
            cells.append(_mf_cell(spec, k, p_idx, penalty, grid, n, cfg, seed, inits))
        sup_penalty = PenaltySpec.convex_dual_family(phi_family, target)
        cells.append(_mf_cell(spec, k, -1, sup_penalty, grid, n, cfg, seed, inits,
                              system="mean_field_sup"))
        for N_cur in N_list:
            bank = NoiseBank.build(seed, N_cur, grid.steps, spec.noise_dim,
                                   spec.mu_in, 0xB0)
            for p_idx, phi in enumerate(phi_family):
                try:
                    nsol = solve_nparticle_fbsde(spec, k, phi, N_cur, grid, cfg, bank)
                    est = nparticle_value(nsol, spec, k, phi, target_cloud=target)
                    cells.append(DualityCell(k=float(k), phi_index=p_idx,
                                             system="n_particle", N=N_cur,
                                             value=est.value, std_error=est.std_error,
                                             converged=nsol.converged))
                except RuntimeError as exc:
                    cells.append(DualityCell(k=float(k), phi_index=p_idx,
                                             system="n_particle", N=N_cur,
                                             value=np.nan, std_error=np.nan,
                                             converged=False, error=str(exc)))

    return _assemble_duality(cells, ks, len(phi_family), N_list)


def _mf_cell(spec, k, p_idx, penalty, grid, n, cfg, seed, inits, system="mean_field"):
    try:
        sol = solve_mkv_fbsde(spec, k, penalty, grid, n, cfg, seed,
                              init_coeffs=inits.get(p_idx), auto_refine=False)
        if sol.grid.steps == grid.steps:
            inits[p_idx] = sol.coeffs
        est = estimate_value(sol, spec, k, penalty)
        return DualityCell(k=float(k), phi_index=p_idx, system=system, N=n,
                           value=est.value, std_error=est.std_error,
                           converged=sol.converged)
    except RuntimeError as exc:
        return DualityCell(k=float(k), phi_index=p_idx, system=system, N=n,
                           value=np.nan, std_error=np.nan, converged=False,
                           error=str(exc))


def _assemble_duality(cells, ks, n_phi, N_list) -> DualityReport:
    by = {(c.k, c.phi_index, c.system, c.N): c for c in cells}
    violations = []
    inner_sup = {}
    # inner sup per k over the clean mean-field phi cells
    for k in ks:
        vals = [(c.value, c.std_error) for c in cells
                if c.k == k and c.system == "mean_field" and not c.error]
        if vals:
            inner_sup[k] = max(v for v, _ in vals)
    # sup-penalty value must dominate every phi cell
    for k in ks:
        sup_cells = [c for c in cells if c.k == k and c.system == "mean_field_sup"
                     and not c.error]
        if not sup_cells:
            continue
        sup_c = sup_cells[0]
        for c in cells:
            if c.k == k and c.system == "mean_field" and not c.error:
                allowance = 3.0 * float(np.hypot(sup_c.std_error, c.std_error))
                if sup_c.value < c.value - allowance:
                    violations.append(["sup_dominates", k, c.phi_index,
                                       c.value - sup_c.value, allowance])
    # inner sup monotone in k
    ordered = [k for k in ks if k in inner_sup]
    for a, b in zip(ordered, ordered[1:]):
        ca = max((c for c in cells if c.k == a and c.system == "mean_field"
                  and not c.error), key=lambda c: c.value)
        cb = max((c for c in cells if c.k == b and c.system == "mean_field"
                  and not c.error), key=lambda c: c.value)
        allowance = 3.0 * float(np.hypot(ca.std_error, cb.std_error))
        if inner_sup[b] < inner_sup[a] - allowance:
            violations.append(["inner_sup_monotone", a, b,
                               inner_sup[a] - inner_sup[b], allowance])
    # N-particle vs mean-field gap shrinking in N
    if len(N_list) >= 2:
        for k in ks:
            for p in range(n_phi):
                cm = next((c for c in cells if c.k == k and c.phi_index == p
                           and c.system == "mean_field" and not c.error), None)
                col = [by.get((k, p, "n_particle", N_cur)) for N_cur in N_list]
                if cm is None or any(c is None or c.error for c in col):
                    continue
                gaps = [abs(c.value - cm.value) for c in col]
                for ca, cb, ga, gb in zip(col, col[1:], gaps, gaps[1:]):
                    allowance = 3.0 * float(np.hypot(ca.std_error, cb.std_error))
                    if gb > ga + allowance:
                        violations.append(["nparticle_gap_decreasing", k, p,
                                           [ga, gb], allowance])
    return DualityReport(cells=cells, inner_sup=inner_sup, violations=violations)
