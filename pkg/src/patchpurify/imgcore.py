"""Value-semantic image buffers and the pixel primitives the pipeline composes.

Images are H x W x C float64 arrays with every value in [0, 1]; masks are
H x W booleans. All operations here are pure: they never mutate their inputs
and are safe to call from any number of workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


class PixelRangeError(ValueError):
    """Pixel data falls outside [0, 1] and clamping was not requested."""


def _locked(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """An H x W x C image, channel values in [0, 1], with value semantics.

    ``data`` is a read-only float64 array; construct via :meth:`from_array`
    or :meth:`constant` so the range and shape invariants hold.
    """

    data: np.ndarray

    @classmethod
    def from_array(cls, arr: np.ndarray, *, clamp: bool = False) -> "ImageTensor":
        """Wrap an (H, W) or (H, W, C) array, C in {1, 3}.

        Values must already lie in [0, 1] unless ``clamp`` is set, in which
        case they are clipped.
        """
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise DimensionError(f"expected (H, W) or (H, W, 1|3) array, got shape {arr.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise DimensionError(f"image dimensions must be >= 1, got {a.shape[:2]}")
        if clamp:
            a = np.clip(a, 0.0, 1.0)
        elif not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0:
            raise PixelRangeError("pixel values outside [0, 1]; pass clamp=True to clip")
        return cls(_locked(a.copy()))

    @classmethod
    def constant(cls, height: int, width: int, channels: int, value: float) -> "ImageTensor":
        return cls.from_array(np.full((height, width, channels), float(value)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def same_dims(self, other: "ImageTensor") -> bool:
        return self.shape == other.shape


@dataclass(frozen=True)
class PixelMask:
    """H x W binary map; True marks a masked (suppressed) pixel."""

    bits: np.ndarray

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PixelMask":
        a = np.asarray(arr)
        if a.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {a.shape}")
        return cls(_locked(a.astype(bool).copy()))

    @classmethod
    def empty(cls, height: int, width: int) -> "PixelMask":
        return cls(_locked(np.zeros((height, width), dtype=bool)))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    @property
    def fraction(self) -> float:
        return self.popcount / self.bits.size

    def union(self, other: "PixelMask") -> "PixelMask":
        if self.bits.shape != other.bits.shape:
            raise DimensionError("mask dimensions differ")
        return PixelMask(_locked(self.bits | other.bits))

    def __or__(self, other: "PixelMask") -> "PixelMask":
        return self.union(other)


@dataclass(frozen=True)
class DistanceMap:
    """H x W map of per-pixel channel-space L2 distances.

    ``channels`` records how many channels the source images had, which
    bounds every value by sqrt(channels).
    """

    values: np.ndarray
    channels: int

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def max_distance(self) -> float:
        return float(np.sqrt(self.channels))


@dataclass(frozen=True)
class Perturbation:
    """A signed additive delta plus the mask of pixels it touches."""

    delta: np.ndarray
    support: PixelMask

    @classmethod
    def clipped(cls, base: ImageTensor, delta: np.ndarray) -> "Perturbation":
        """Build a perturbation for ``base``, clipping so base + delta stays in range."""
        d = np.asarray(delta, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.shape != base.shape:
            raise DimensionError(f"delta shape {d.shape} does not match image {base.shape}")
        d = np.clip(base.data + d, 0.0, 1.0) - base.data
        support = PixelMask.from_array(np.any(d != 0.0, axis=2))
        return cls(_locked(d), support)

    @classmethod
    def from_images(cls, clean: ImageTensor, perturbed: ImageTensor) -> "Perturbation":
        if not clean.same_dims(perturbed):
            raise DimensionError("image dimensions differ")
        d = perturbed.data - clean.data
        return cls(_locked(d.copy()), PixelMask.from_array(np.any(d != 0.0, axis=2)))


# ---------------------------------------------------------------------------
# resampling primitives


def _paired_window_sum(x: np.ndarray, s: int) -> np.ndarray:
    # Pairwise-halving keeps window sums of identical values exact, which the
    # energy-attenuation law relies on for constant regions.
    while s > 1 and s % 2 == 0:
        x = x[:, 0::2] + x[:, 1::2]
        x = x[:, :, :, 0::2] + x[:, :, :, 1::2]
        s //= 2
    if s > 1:
        x = x.sum(axis=1, keepdims=True).sum(axis=3, keepdims=True)
    return x


def downsample(img: ImageTensor, s: int) -> ImageTensor:
    """Average-pool by an integer factor: each output pixel is the mean of
    its s x s source window, per channel.

    Dimensions must be divisible by ``s``; callers with ragged sizes pad
    first (see :func:`pad_to_multiple`).
    """
    if s < 2:
        raise ValueError(f"scale factor must be >= 2, got {s}")
    if s > img.height or s > img.width:
        raise ValueError(f"scale {s} exceeds image dimensions {img.height}x{img.width}")
    if img.height % s or img.width % s:
        raise DimensionError(f"dimensions {img.height}x{img.width} not divisible by {s}")
    h, w = img.height // s, img.width // s
    win = img.data.reshape(h, s, w, s, img.channels)
    out = _paired_window_sum(win, s).reshape(h, w, img.channels) / (s * s)
    return ImageTensor(_locked(out))


_CUBIC_A = -0.5  # Catmull-Rom


def _cubic(x: float) -> float:
    x = abs(x)
    if x <= 1.0:
        return (_CUBIC_A + 2.0) * x**3 - (_CUBIC_A + 3.0) * x**2 + 1.0
    if x < 2.0:
        return _CUBIC_A * (x**3 - 5.0 * x**2 + 8.0 * x - 4.0)
    return 0.0


def _phase_weights(f: int) -> list[tuple[int, np.ndarray]]:
    # Half-pixel mapping: output pixel p sits at source offset (p+0.5)/f - 0.5.
    phases = []
    for p in range(f):
        src = (p + 0.5) / f - 0.5
        base = int(np.floor(src))
        frac = src - base
        w = np.array([_cubic(frac + 1.0), _cubic(frac), _cubic(frac - 1.0), _cubic(frac - 2.0)])
        phases.append((base, w))
    return phases


def _upscale_axis(x: np.ndarray, f: int) -> np.ndarray:
    n = x.shape[0]
    out = np.empty((n * f,) + x.shape[1:], dtype=np.float64)
    idx = np.arange(n)
    for p, (base, w) in enumerate(_phase_weights(f)):
        taps = [np.clip(idx + base - 1 + t, 0, n - 1) for t in range(4)]
        a = int(np.argmax(np.abs(w)))
        # Anchor on the dominant tap so constant runs reproduce bit-exactly
        # (the four weights always sum to 1).
        acc = x[taps[a]].copy()
        for t in range(4):
            if t != a:
                acc += w[t] * (x[taps[t]] - x[taps[a]])
        out[p::f] = acc
    return out


def bicubic_upscale(img: ImageTensor, f: int) -> ImageTensor:
    """Separable bicubic interpolation by an integer factor, replicated
    borders, output clamped to [0, 1]."""
    if f < 2:
        raise ValueError(f"scale factor must be >= 2, got {f}")
    out = _upscale_axis(img.data, f)
    out = np.moveaxis(_upscale_axis(np.moveaxis(out, 1, 0), f), 0, 1)
    return ImageTensor(_locked(np.clip(out, 0.0, 1.0)))


def pad_to_multiple(img: ImageTensor, s: int) -> tuple[ImageTensor, tuple[int, int]]:
    """Reflect-pad on the bottom/right edges up to the next multiple of ``s``.

    Returns the padded image and the original (height, width) for cropping
    back after a round trip.
    """
    ph = (-img.height) % s
    pw = (-img.width) % s
    if ph == 0 and pw == 0:
        return img, (img.height, img.width)
    data = img.data
    while ph or pw:
        # symmetric mode caps pad width at the current size; loop for tiny images
        dh = min(ph, data.shape[0])
        dw = min(pw, data.shape[1])
        data = np.pad(data, ((0, dh), (0, dw), (0, 0)), mode="symmetric")
        ph -= dh
        pw -= dw
    return ImageTensor(_locked(data)), (img.height, img.width)


def crop(img: ImageTensor, height: int, width: int) -> ImageTensor:
    if height > img.height or width > img.width:
        raise DimensionError("crop size exceeds image")
    return ImageTensor(_locked(img.data[:height, :width].copy()))


# ---------------------------------------------------------------------------
# masking primitives


def perturbation_energy(p: Perturbation) -> float:
    """Sum of squared delta values over every pixel and channel."""
    return float(np.sum(p.delta * p.delta))


def distance_map(a: ImageTensor, b: ImageTensor) -> DistanceMap:
    """Per-pixel Euclidean distance over channels between two images."""
    if not a.same_dims(b):
        raise DimensionError(f"image dimensions differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    values = np.sqrt(np.sum(diff * diff, axis=2))
    return DistanceMap(_locked(values), a.channels)


def threshold_mask(d: DistanceMap, threshold: float, prior: PixelMask) -> tuple[PixelMask, int]:
    """Pixels whose distance exceeds ``threshold`` and are not already in
    ``prior``; returns the newly-flagged mask and its population count.

    Pixels already masked are never re-counted: once suppressed they keep
    producing large distances forever and would stall the stop rule.
    """
    if not 0.0 < threshold < d.max_distance:
        raise ValueError(
            f"threshold must lie in (0, sqrt(C)) = (0, {d.max_distance:.4f}), got {threshold}"
        )
    if prior.bits.shape != d.values.shape:
        raise DimensionError("prior mask dimensions do not match distance map")
    newly = (d.values > threshold) & ~prior.bits
    return PixelMask(_locked(newly)), int(newly.sum())


def apply_mask(img: ImageTensor, m: PixelMask) -> ImageTensor:
    """Zero out masked pixels in every channel; unmasked pixels are
    bit-identical to the input."""
    if (img.height, img.width) != (m.height, m.width):
        raise DimensionError("mask dimensions do not match image")
    out = img.data.copy()
    out[m.bits] = 0.0
    return ImageTensor(_locked(out))


# ---------------------------------------------------------------------------
# PNG I/O (8-bit sRGB; v/255 on load, round(v*255) on save)


def load_png(path) -> ImageTensor:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode not in ("1", "I", "I;16", "F") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageTensor.from_array(arr)


def save_png(img: ImageTensor, path) -> None:
    arr = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    if img.channels == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_mask_png(path) -> PixelMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return PixelMask.from_array(arr >= 128)


def save_mask_png(m: PixelMask, path) -> None:
    arr = np.where(m.bits, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
