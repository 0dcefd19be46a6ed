"""CPU decode-phase kernel library: chunk-independent softmax with a unified
scaling factor, flat GEMM with 8-row padding and double buffering, and
profile-driven GEMM dispatch."""

from .backend import active_backend, set_backend, worker_count
from .matrix import GemmShape, as_matrix, gemm_oracle, load_matrix, pad_rows, save_matrix
from .softmax import (
    DegenerateSumError,
    PartialSoftmaxState,
    ScalingCalibration,
    SoftmaxOverflow,
    UncalibratableRange,
    calibrate,
    check_bounds,
    merge_states,
    partial_softmax_sync,
    softmax_reference,
    softmax_unified,
)
from .attention import (
    AttentionConfig,
    AttnStats,
    attention_reference,
    batch_decode_attention,
    decode_attention_async,
    decode_attention_sync,
)
from .flatgemm import (
    CostEstimate,
    TileConfig,
    arithmetic_intensity,
    double_buffer_pipeline,
    flat_gemm,
    select_tile,
)
from .dispatch import (
    DispatchEntry,
    DispatchTable,
    KernelChoice,
    TimingUnstable,
    UnknownShape,
    dispatch,
    impl_a_gemv,
    impl_b_flat,
    impl_c_blocked,
    load_table,
    profile_shape,
    save_table,
)
from .pipeline import LayerConfig, PRESETS, decode_layer, get_preset

__version__ = "0.1.0"
