from .errors import ExportError
from .export import SyntheticImages, export_traces, resolve_splits
from .models import PRESETS, block_modules, build_model
from .spec import DATASETS, ExportSpec

__version__ = "0.1.0"

__all__ = [
    "DATASETS",
    "ExportError",
    "ExportSpec",
    "PRESETS",
    "SyntheticImages",
    "block_modules",
    "build_model",
    "export_traces",
    "resolve_splits",
]
