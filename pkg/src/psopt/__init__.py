"""Parameter-server training protocols at desk scale.

Asynchronous updates trade gradient staleness for throughput; synchronous
aggregation with a few backup workers removes the staleness while absorbing
stragglers.  This package implements both protocols over small hand-
differentiated models, drives them through a deterministic discrete-event
simulator or a threaded runtime, and ships the measurement tools (staleness
tables, arrival-order statistics, worker/backup split estimation) to study
the trade-offs.
"""
from .config import ExperimentConfig, load_config, parse_config
from .data import Dataset, generate_synthetic, load_csv, sample_batch
from .harness import run_experiment, sweep
from .metrics import ConvergenceCriterion, MetricsRow, epochs_to_epsilon, time_to_epsilon
from .models import (
    LayeredGradient,
    LayeredParams,
    Model,
    eval_gradient,
    eval_loss,
    eval_metric,
    finite_diff_gradient,
    init_params,
)
from .optim import (
    EmaState,
    LrSchedule,
    RmsPropState,
    clip_by_global_norm,
    ema_update,
    lr_at,
    rmsprop_momentum_step,
    sgd_step,
)
from .protocol import (
    GradientMessage,
    ProtocolError,
    ReadSnapshot,
    ShardState,
    SyncCollector,
    TimeoutCollector,
    UpdateRule,
    async_ps_apply,
    async_worker_step,
    make_shards,
    read_snapshot,
    sync_ps_apply,
    sync_worker_step,
)
from .results import RunOutput
from .simulate import run_sim
from .staleness import (
    ParamHistory,
    StalenessSchedule,
    StalenessStats,
    measure_staleness,
    ramp_target,
    run_serial,
    stale_step,
)
from .stragglers import (
    ArrivalStats,
    ConfigEstimate,
    IterationsCurve,
    arrival_cdf,
    best_config,
    kth_arrival_stats,
)
from .timing import LatencyModel, TimingProfile, TimingSplit, layer_event_times, sample_duration
from .trace import EventTrace, validate_trace

__version__ = "0.1.0"
