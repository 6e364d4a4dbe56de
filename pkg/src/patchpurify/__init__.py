"""Adversarial-patch purification by iterative rescale-and-mask cycles."""

from .imgcore import (
    DimensionError,
    DistanceMap,
    ImageTensor,
    Perturbation,
    PixelMask,
    PixelRangeError,
    apply_mask,
    bicubic_upscale,
    distance_map,
    downsample,
    load_mask_png,
    load_png,
    perturbation_energy,
    save_mask_png,
    save_png,
    threshold_mask,
)
from .patchlab import (
    MaskMetrics,
    PatchSpec,
    PatchSpecError,
    ReconErrorStats,
    SweepRow,
    WorkloadSpec,
    eval_masking,
    gradient_background,
    inject,
    recon_error_stats,
    smooth_background,
    sweep_lambda,
    sweep_patch_size,
)
from .purifier import (
    ConfigError,
    IterationRecord,
    IterationTrace,
    PurifyConfig,
    PurifyError,
    PurifyResult,
    enhance,
    purify,
    purify_plus,
)
from .resolver import (
    ArtifactError,
    BicubicUpscaler,
    InferenceError,
    ModelArtifact,
    NeuralUpscaler,
    ResolverError,
    ScaleMismatchError,
    SuperResolver,
    classical_upscale,
    neural_upscale,
    tiled_upscale,
)

__version__ = "0.1.0"
