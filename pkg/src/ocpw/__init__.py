"""Overlapped error-bounded lossy compression with parallel shared-file writes."""

from .codec import (
    CompressedBlock,
    ErrorBoundConfig,
    FieldPartition,
    compress,
    decompress,
    entropy_decode,
    entropy_encode,
    lorenzo_predict,
    quantize_linear,
)
from .datagen import FieldSpec, gen_smooth_field, ingest_raw, partition_domain, write_raw
from .engine import (
    Dataset,
    WriteReport,
    read_and_verify,
    run_baseline_write,
    run_method,
    run_overlapped_write,
)
from .errors import (
    ConsistencyFault,
    DecodeError,
    IncompleteGather,
    InvalidInput,
    OCPWError,
    TooFewSamples,
    TooLargeInstance,
    UnsupportedValue,
)
from .models import (
    CalibrationSample,
    RatioEstimate,
    ThroughputModel,
    ThroughputRegressor,
    calibrate_write_throughput,
    estimate_ratio,
    fit_throughput_model,
    predict_compression_time,
    predict_write_time,
)
from .planner import (
    ExtraSpacePolicy,
    LayoutPlan,
    OffsetMetadata,
    decode_metadata,
    effective_extra_ratio,
    encode_metadata,
    plan_offsets,
)
from .scheduler import (
    FieldTask,
    ScheduleQueue,
    brute_force_order,
    johnson_order,
    optimize_order,
    time_of_queue,
)
from .simsys import SimWorkload, Timeline, compare_methods, simulate

__version__ = "0.1.0"
