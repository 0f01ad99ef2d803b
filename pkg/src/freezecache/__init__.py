"""Early-exit inference for small dense networks.

A frozen network's per-layer activations are reduced to short embeddings
and matched against a per-layer cache of labeled representatives. When a
lookup is confident past a calibrated threshold, inference stops there and
the cached label is returned; otherwise the next layer runs.
"""

from .cache import (
    LayerCache,
    LookupResult,
    construct_centroid_cache,
    construct_knn_cache,
    load_caches,
    lookup,
    memory_bytes,
    save_caches,
)
from .engine import (
    EvaluationRun,
    FreezeResult,
    batch_evaluate,
    freeze_infer,
    freeze_infer_live,
    oracle_freeze,
)
from .errors import (
    ConfigurationError,
    FormatError,
    FreezeCacheError,
    TrainingDivergedError,
)
from .metrics import (
    MetricsReport,
    agreement_accuracy,
    build_metrics_report,
    frozen_cdf,
    purity_report,
    sweep,
)
from .neighbors import kmeans_fit, knn_query
from .reduce import Reducer, apply_reducer, embed_one, train_reducer
from .threshold import (
    ThresholdTable,
    compute_thresholds,
    max_wrong_confidence,
    scale_thresholds,
)
from .trace import (
    ActivationTrace,
    RefModel,
    forward_collect,
    generate_synthetic,
    read_trace,
    train_reference_model,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationTrace",
    "ConfigurationError",
    "EvaluationRun",
    "FormatError",
    "FreezeCacheError",
    "FreezeResult",
    "LayerCache",
    "LookupResult",
    "MetricsReport",
    "Reducer",
    "RefModel",
    "ThresholdTable",
    "TrainingDivergedError",
    "agreement_accuracy",
    "apply_reducer",
    "batch_evaluate",
    "build_metrics_report",
    "compute_thresholds",
    "construct_centroid_cache",
    "construct_knn_cache",
    "embed_one",
    "forward_collect",
    "freeze_infer",
    "freeze_infer_live",
    "frozen_cdf",
    "generate_synthetic",
    "kmeans_fit",
    "knn_query",
    "load_caches",
    "lookup",
    "max_wrong_confidence",
    "memory_bytes",
    "oracle_freeze",
    "purity_report",
    "read_trace",
    "save_caches",
    "scale_thresholds",
    "sweep",
    "train_reducer",
    "train_reference_model",
    "write_trace",
    "__version__",
]
