from .budget import QueryBudget, query_budget_estimate
from .calibrate import CalibrationResult, LayerCalibration, calibrate_layer_input_centric, calibrate_neuron
from .config import AttackConfig, ConfigError
from .deeper import forward64, grid_search_deeper, solve_deeper, unwrap_layers
from .errors import (AttackError, InsufficientThresholdDiversity, LostBracket, NoClassChange, RankDeficient,
                     SignAmbiguous, TargetUnreachable, Unreachable)
from .input_centric import compare_on_input, gap_search, input_centric_recover
from .observable import BOTTOM, TOP, ObservableMap, observable_map
from .oracle import Oracle, Response
from .recover import ErrorReport, RecoveredLayer, error_report, recover_first_layer
from .search import ConvergenceSet, binary_search_threshold, collect_convergence_sets, verify_certificate
from .solve import solve_neuron, solve_rows
