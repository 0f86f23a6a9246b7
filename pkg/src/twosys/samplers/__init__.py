from .ensemble import (
    KERNELS,
    MODES,
    EnsembleState,
    RunRecord,
    SamplerConfig,
    SweepResult,
    adaptive_sweep,
    apply_restart,
    coupled_sweep,
    cross_covariance,
    initial_positions,
    propose_system,
    restart_schedule,
    run_sampler,
)
from .kernels import (
    ProposalOutcome,
    makla_propose,
    makla_step,
    mala_accept_log_ratio,
    mala_log_q,
    mala_log_ratio,
    mala_mean,
    mala_propose,
    mala_step,
    oabao_trajectory,
    truncated_drift,
)
from .stepsize import StepSizeDist, continuous_cdf, eta_from_gamma, sample_step_size
from .streams import StreamFactory
from .tuning import tune_step_size
