"""Learn unknown second-order dynamics with exact GP regression, wrap a
PD loop around the learned compensation and certify semi-passivity of
the closed loop with a probabilistic error bound."""

from .bounds import (BoundConfig, ModelErrorBound, compute_error_bound,
                     delta_bar, delta_sc_from_delta, delta_vector,
                     information_gain, pointwise_bound, rkhs_norm_estimate)
from .domain import DomainSpec
from .dynamics import (DuffingOscillator, DuffingParams, SystemDynamics,
                       Trajectory, closed_loop_step, duffing_f,
                       duffing_f_inverse, generate_training_data,
                       gp_feedforward, passive_output, pd_control,
                       resolve_xdot2, simulate, vector_field)
from .gp import (GPModel, Hyperparameters, OptimizerConfig, TrainingSet, fit,
                 gram_matrix, kernel_eval, load_model,
                 log_marginal_likelihood, optimize_hyperparameters,
                 predict_mean, predict_var, save_model)
from .audit import (AuditReport, CoverageReport, model_error_empirical,
                    semipassivity_audit, vdot_numeric, xdot_containment_check)
from .passivation import (GainSet, PassivityCertificate, certify,
                          check_gain_caps, h_value, is_lambda_pd,
                          lambda_matrix, lambda_min_eig, passivity_radius,
                          required_xdot_bound, storage_value,
                          synthesize_gains, xdot2_envelope)

__version__ = "0.1.0"
