"""The iterative purification loop.

Each iteration rebuilds the current image through a downsample/super-resolve
round trip, masks pixels whose reconstruction error exceeds the threshold,
and repeats until the number of newly masked pixels drops below the stopping
tolerance. An optional enhancement pass (upscale then downsample, no
masking) follows to launder low-amplitude distributed perturbations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

from .imgcore import (
    DimensionError,
    ImageTensor,
    PixelMask,
    apply_mask,
    crop,
    distance_map,
    downsample,
    pad_to_multiple,
    threshold_mask,
)
from .resolver import ResolverError, SuperResolver

EPSILON_MODES = ("count", "fraction")
ORDERINGS = ("down_up", "up_down")


class ConfigError(ValueError):
    """Purification parameters violate their invariants."""


@dataclass(frozen=True)
class PurifyConfig:
    """Knobs of the masking loop.

    ``threshold`` bounds the per-pixel channel-space L2 reconstruction error
    above which a pixel is suppressed. ``epsilon`` stops the loop once fewer
    pixels than this are newly masked in an iteration, read as an absolute
    count or as a fraction of H*W depending on ``epsilon_mode``.
    """

    threshold: float = 0.7
    epsilon: float = 4.0
    epsilon_mode: str = "count"
    max_iters: int = 30
    mask_scale: int = 4
    enhance_scale: int = 2
    enhance: bool = False
    ordering: str = "down_up"

    def __post_init__(self):
        if not 0.0 < self.threshold < math.sqrt(3.0):
            raise ConfigError(f"threshold must lie in (0, sqrt(3)), got {self.threshold}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.epsilon_mode not in EPSILON_MODES:
            raise ConfigError(f"epsilon_mode must be one of {EPSILON_MODES}, got {self.epsilon_mode!r}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.mask_scale not in (2, 4) or self.enhance_scale not in (2, 4):
            raise ConfigError("scale factors must be 2 or 4")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")

    def stop_limit(self, height: int, width: int) -> float:
        """The newly-masked count below which iteration halts."""
        if self.epsilon_mode == "count":
            return self.epsilon
        return self.epsilon * height * width


@dataclass(frozen=True)
class IterationRecord:
    t: int
    newly_masked: int
    cumulative_masked: int
    cumulative_fraction: float


@dataclass(frozen=True)
class IterationTrace:
    """Per-iteration masking counts and why the loop stopped."""

    records: tuple[IterationRecord, ...]
    stop_reason: str  # "converged" | "max_iters"

    @property
    def total_iterations(self) -> int:
        return len(self.records)

    @property
    def newly_masked_series(self) -> list[int]:
        return [r.newly_masked for r in self.records]

    @property
    def cumulative_series(self) -> list[int]:
        return [r.cumulative_masked for r in self.records]

    def to_dict(self) -> dict:
        return {
            "iterations": [
                {"t": r.t, "new": r.newly_masked, "cum": r.cumulative_masked,
                 "frac": r.cumulative_fraction}
                for r in self.records
            ],
            "stop_reason": self.stop_reason,
            "total": self.total_iterations,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "IterationTrace":
        recs = tuple(
            IterationRecord(int(r["t"]), int(r["new"]), int(r["cum"]), float(r["frac"]))
            for r in d["iterations"]
        )
        return cls(recs, str(d["stop_reason"]))


@dataclass(frozen=True)
class PurifyResult:
    """Masked image, the full trace, and the cumulative pixel mask."""

    image: ImageTensor
    trace: IterationTrace
    mask: PixelMask


class PurifyError(RuntimeError):
    """A backend failure inside the loop, annotated with the iteration."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"backend failed at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.__cause__ = cause


def _validate(x: ImageTensor, cfg: PurifyConfig, g: SuperResolver) -> None:
    if not cfg.threshold < math.sqrt(x.channels):
        raise ConfigError(
            f"threshold {cfg.threshold} is not below sqrt(C)={math.sqrt(x.channels):.4f} "
            f"for a {x.channels}-channel image"
        )
    if cfg.mask_scale not in g.supported_factors:
        raise ConfigError(
            f"backend supports factors {sorted(g.supported_factors)}, "
            f"mask_scale={cfg.mask_scale} requested"
        )


def _reconstruct(work: ImageTensor, cfg: PurifyConfig, g: SuperResolver) -> ImageTensor:
    """One rescaling round trip at mask_scale, back at the original dims."""
    s = cfg.mask_scale
    if cfg.ordering == "up_down":
        return downsample(g.upscale(work, s), s)
    padded, (h, w) = pad_to_multiple(work, s)
    recon = g.upscale(downsample(padded, s), s)
    if recon.shape != work.shape:
        recon = crop(recon, h, w)
    return recon


def purify(x: ImageTensor, cfg: PurifyConfig, g: SuperResolver) -> PurifyResult:
    """Run the iterative masking loop and return the cleaned image.

    The current (already masked) image is compared against its own
    reconstruction each round, so the mask grows monotonically; pixels in
    the cumulative mask never re-count toward the stop rule.
    """
    _validate(x, cfg, g)
    work = x
    cum = PixelMask.empty(x.height, x.width)
    limit = cfg.stop_limit(x.height, x.width)
    records: list[IterationRecord] = []
    stop_reason = "max_iters"
    for t in range(1, cfg.max_iters + 1):
        try:
            recon = _reconstruct(work, cfg, g)
        except (ResolverError, DimensionError, ValueError) as e:
            raise PurifyError(t, e) from e
        d = distance_map(work, recon)
        newly, count = threshold_mask(d, cfg.threshold, cum)
        cum = cum | newly
        if count:
            work = apply_mask(work, newly)
        records.append(IterationRecord(t, count, cum.popcount, cum.fraction))
        if count < limit:
            stop_reason = "converged"
            break
    return PurifyResult(work, IterationTrace(tuple(records), stop_reason), cum)


def enhance(x: ImageTensor, cfg: PurifyConfig, g: SuperResolver) -> ImageTensor:
    """Upscale then downsample at enhance_scale; no masking, dims preserved."""
    if cfg.enhance_scale not in g.supported_factors:
        raise ConfigError(
            f"backend supports factors {sorted(g.supported_factors)}, "
            f"enhance_scale={cfg.enhance_scale} requested"
        )
    up = g.upscale(x, cfg.enhance_scale)
    return downsample(up, cfg.enhance_scale)


def purify_plus(x: ImageTensor, cfg: PurifyConfig, g: SuperResolver) -> PurifyResult:
    """purify, then the enhancement pass when cfg.enhance is set.

    Enhancement is a pure post-filter: the trace and mask come from the
    masking loop alone.
    """
    result = purify(x, cfg, g)
    if not cfg.enhance:
        return result
    return replace(result, image=enhance(result.image, cfg, g))
