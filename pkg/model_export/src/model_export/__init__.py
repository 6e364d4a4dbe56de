"""One-shot tooling: convert RRDB generator checkpoints to the safetensors
artifact consumed by the purification library, and verify parity."""

__version__ = "0.1.0"

from .export import (  # noqa: E402
    ArchSpec,
    CheckpointError,
    ConversionError,
    ExportError,
    ExportManifest,
    ParityError,
    ParityReport,
    export,
    infer_arch,
    load_checkpoint,
    verify,
)

__all__ = [
    "ArchSpec",
    "CheckpointError",
    "ConversionError",
    "ExportError",
    "ExportManifest",
    "ParityError",
    "ParityReport",
    "export",
    "infer_arch",
    "load_checkpoint",
    "verify",
    "__version__",
]
