"""Differentiable convex optimization layers with a QP-based backward pass."""
from .backward import (ActiveSet, BackwardProblem, BackwardSolution, GradientBundle,
                       assemble_qp_gradients, bpqp_backward, build_backward_problem,
                       cosine_similarity, detect_active_set, exact_backward_oracle,
                       gradient_cos_sim, solve_backward)
from .exceptions import *  # noqa: F401,F403
from .generators import GenSpec, gen_lp, gen_qp, gen_socp, generate
from .layers import (LayerTape, LpLayerSpec, SocpGradients, SocpLayerSpec,
                     attach_external_solution, lp_layer_backward, lp_layer_forward,
                     qp_layer_backward, qp_layer_forward, socp_layer_backward,
                     socp_exact_oracle, socp_layer_forward)
from .linalg import KktSystem, factor_and_solve, factorize, iterative_refinement
from .qp import (QpProblem, Solution, SolverSettings, Status, admm_solve, kkt_residual_norm,
                 polish, solve)

from .portfolio import (MvoSpec, ReturnsPanel, TrainConfig, mvo_backward, mvo_forward,
                        portfolio_metrics, regret_prediction_loss, statistical_risk_model,
                        synthetic_panel, train_e2e, train_two_stage)
from .bench import (BenchConfig, BenchRow, emit_report, finite_difference_audit,
                    run_benchmark)

__version__ = "0.1.0"
