"""Detection and slice quarantine of malicious IoT devices behind aggregated SDN flows."""

from .analytics import (
    AnalyticScenario,
    DiscreteDistribution,
    brute_force_p_detect,
    contribution_nonzero_types,
    legit_rate_distribution,
    malicious_excess_distribution,
    p_detect_general,
    p_detect_special,
    p_flow_contains_malicious,
)
from .catalog import Catalog, DeviceTypeSpec, builtin_factory_catalog, legit_rate, load_catalog, mean_rate
from .detection import DetectionVerdict, classify_flow, threshold_detection_limit
from .errors import CapacityError, EnvelopeError, PreconditionError
from .montecarlo import ExperimentMetrics, ExperimentSpec, run_experiment, run_round, sweep
from .quarantine import (
    ReassignmentMode,
    ReassignmentTimings,
    SliceNetwork,
    run_closed_loop,
)
from .traffic import Device, FlowPopulation, ScenarioParams, effective_period, frames_in_window, measure_flow, sample_population

__version__ = "0.1.0"
