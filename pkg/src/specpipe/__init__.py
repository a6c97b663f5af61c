"""Speculative pipelined encryption for confidential CPU-GPU data transfer.

A counter-synchronized authenticated channel, a swap-pattern predictor, a
speculative-ciphertext validator, the pipelined runtime that ties them
together, synthetic workload generators, and a trace-driven performance
simulator.
"""

__version__ = "0.1.0"

from .channel import (
    AuthError,
    ChannelEndpoint,
    ChannelKey,
    CiphertextMsg,
    Direction,
    decrypt_at,
    encrypt_at,
    new_channel,
)
from .engine import CopyRequest, Engine, EngineConfig
from .memory import (
    AllocError,
    BoundsError,
    HostMemory,
    KvCache,
    MemoryBlock,
    ModelLayer,
    SmallIo,
    prng_fill,
)
from .predictor import (
    AmbiguousProfile,
    ModelProfile,
    PatternKind,
    Prediction,
    Predictor,
    PredictorConfig,
    SwapHistory,
    TransferClass,
    UnknownBlock,
    classify,
    predict_next,
    recognize,
)
from .simulator import (
    CostModel,
    Metrics,
    SimConfig,
    SystemKind,
    TransferMode,
    analytic_bound,
    calibration_report,
    run,
    run_detailed,
    transfer_time,
)
from .validator import (
    CiphertextRecord,
    OverlapError,
    RecordState,
    StateError,
    ValidationVerdict,
    Validator,
    VerdictKind,
)
from .workload import (
    Trace,
    TraceFormatError,
    gen_adversarial_trace,
    gen_kvswap_trace,
    gen_offload_trace,
    load_trace,
    save_trace,
    validate_trace,
)
