"""Mean-field Schrodinger bridges by penalized McKean-Vlasov FBSDE particle
methods, with N-particle counterparts, propagation-of-chaos diagnostics and
grid-based oracles."""

from .fbsde import (FbsdeSolution, FrozenFlow, NoiseBank, NonFiniteStateError,
                    SolverConfig, SolverDivergenceError, TimeGrid)
from .measures import (MeasureSpec, ParticleCloud, convex_order_gap,
                       empirical_moments, sample, wasserstein, wasserstein_info)
from .model import (CostSpec, F2Spec, InteractionSpec, LambdaRootFindError,
                    ProblemSpec, drift_B, h1, lambda_min, running_cost,
                    sensitivity_F)
from .penalty import (Feature, PenaltySpec, PhiFamily, RidgePhi, SmoothedNormPhi,
                      default_feature_set, default_phi_family,
                      displacement_convexity_probe, penalty_lderiv, penalty_value)
from .mkv_solver import (LadderReport, ValueEstimate, estimate_value,
                         run_k_ladder, solve_mkv_fbsde)
from .particle_solver import NParticleSolution, nparticle_value, solve_nparticle_fbsde
from .chaos import (ChaosReport, DualityReport, MartingaleReport, duality_checks,
                    epsilon_n, martingale_test, synchronous_coupling_error)
from .oracle import (GridBridge, SinkhornError, dp_entropic_value,
                     finite_diff_check, grid_sinkhorn_bridge,
                     mean_steer_closed_form, mean_steer_shooting)

__version__ = "0.1.0"
