"""L1 adaptive control, lifted-domain ILC and relative-degree-structured transfer maps."""

from .ilc import (Constraints, IlcConfig, IlcState, KalmanConfig, LearningRecord, ilc_update,
                  init_from_transfer, kalman_update, run_ilc)
from .l1 import L1Config, L1Controller, L1State, l1_step, projection, verify_l1_norm_condition
from .lti import (LiftedModel, StateSpaceModel, VectorRelativeDegree, discretize_reference,
                  estimate_relative_degree_from_steps, lifted_representation,
                  minimum_phase_check, simulate, step_experiments, vector_relative_degree)
from .plant import (PlantModel, Trajectory, rollout, source_like, target_like, tracking_error,
                    trajectory_library)
from .qp import QPResult, solve_qp
from .transfer import (StateReconstructor, TransferMap, apply_transfer_map_online,
                       build_window_io, build_window_state, fit_transfer_map,
                       map_between_reference_models, perfect_tracking_input, state_reconstructor)

__version__ = "0.1.0"
