"""Super-resolution backends.

Two interchangeable upscalers sit behind one small interface: a deterministic
bicubic interpolator (fast, model-free, used for testing and as the naive
ablation baseline) and a neural backend that executes a serialized
residual-dense-block SR generator. Network weights travel as a safetensors
file plus a JSON sidecar ``{scale, channels, version, features, blocks,
growth}``; inference runs on a small numpy executor, so the package needs no
deep-learning framework at runtime.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, runtime_checkable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from safetensors.numpy import load_file

from .imgcore import ImageTensor, bicubic_upscale, _locked

CLASSICAL_FACTORS = frozenset({2, 4})


class ResolverError(Exception):
    """Base for all backend failures."""


class ArtifactError(ResolverError):
    """The model artifact or its sidecar could not be loaded."""


class ScaleMismatchError(ResolverError):
    """Declared scale does not match the network's actual output ratio."""


class InferenceError(ResolverError):
    """The loaded network failed while producing an output."""


@runtime_checkable
class SuperResolver(Protocol):
    """Anything that can upscale an image by a supported integer factor."""

    @property
    def supported_factors(self) -> frozenset[int]: ...

    def upscale(self, img: ImageTensor, f: int) -> ImageTensor: ...


# ---------------------------------------------------------------------------
# classical backend


class BicubicUpscaler:
    """Deterministic bicubic interpolation; supports factors 2 and 4."""

    supported_factors = CLASSICAL_FACTORS

    def upscale(self, img: ImageTensor, f: int) -> ImageTensor:
        if f not in self.supported_factors:
            raise ValueError(f"unsupported scale factor {f}; supported: {sorted(self.supported_factors)}")
        return bicubic_upscale(img, f)


def classical_upscale(img: ImageTensor, f: int) -> ImageTensor:
    """Bicubic upscale to (H*f, W*f), clamped to [0, 1]; f must be 2 or 4."""
    return BicubicUpscaler().upscale(img, f)


# ---------------------------------------------------------------------------
# neural backend


@dataclass(frozen=True)
class ModelArtifact:
    """A serialized generator plus the sidecar metadata describing it."""

    path: Path
    scale: int
    channels: int
    version: str
    features: int
    blocks: int
    growth: int

    @classmethod
    def load(cls, path: str | Path) -> "ModelArtifact":
        path = Path(path)
        sidecar = path.with_suffix(".json")
        if not path.is_file():
            raise ArtifactError(f"artifact not found: {path}")
        if not sidecar.is_file():
            raise ArtifactError(f"sidecar not found: {sidecar}")
        try:
            meta = json.loads(sidecar.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ArtifactError(f"unreadable sidecar {sidecar}: {e}") from e
        try:
            art = cls(
                path=path,
                scale=int(meta["scale"]),
                channels=int(meta["channels"]),
                version=str(meta.get("version", "unknown")),
                features=int(meta["features"]),
                blocks=int(meta["blocks"]),
                growth=int(meta["growth"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactError(f"sidecar {sidecar} missing or invalid field: {e}") from e
        if art.scale not in (2, 4):
            raise ArtifactError(f"unsupported declared scale {art.scale}; expected 2 or 4")
        if art.channels not in (1, 3):
            raise ArtifactError(f"unsupported channel count {art.channels}")
        return art


def _lrelu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, 0.2 * x)


def _conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # x: (H, W, Cin); weight: (Cout, Cin, 3, 3) as exported from the trainer.
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, Cin, 3, 3)
    return np.tensordot(win, weight, axes=([2, 3, 4], [1, 2, 3])) + bias


def _pixel_unshuffle2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    out = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3)
    return out.reshape(h // 2, w // 2, c * 4)


def _repeat2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=0).repeat(2, axis=1)


class _Generator:
    """Numpy executor for the residual-in-residual dense-block SR generator.

    Layout: first conv, ``blocks`` dense residual groups with a trunk conv
    and long skip, two nearest-x2 upsampling stages, an HR conv and the
    output conv. Scale-2 variants pixel-unshuffle the input first so the
    trunk always works at 1/4 of the output resolution.
    """

    def __init__(self, artifact: ModelArtifact):
        try:
            tensors = load_file(str(artifact.path))
        except Exception as e:
            raise ArtifactError(f"cannot load weights from {artifact.path}: {e}") from e
        self.artifact = artifact
        self.w = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}
        in_ch = artifact.channels * (4 if artifact.scale == 2 else 1)
        self._check_tensor("conv_first.weight", (artifact.features, in_ch, 3, 3))
        for b in range(artifact.blocks):
            for r in (1, 2, 3):
                for c in range(1, 6):
                    if f"body.{b}.rdb{r}.conv{c}.weight" not in self.w:
                        raise ArtifactError(
                            f"missing tensor body.{b}.rdb{r}.conv{c}.weight in {artifact.path}"
                        )
        for name in ("conv_body", "conv_up1", "conv_up2", "conv_hr", "conv_last"):
            if f"{name}.weight" not in self.w:
                raise ArtifactError(f"missing tensor {name}.weight in {artifact.path}")

    def _check_tensor(self, key: str, shape: tuple[int, ...]) -> None:
        if key not in self.w:
            raise ArtifactError(f"missing tensor {key} in {self.artifact.path}")
        if self.w[key].shape != shape:
            raise ArtifactError(
                f"tensor {key} has shape {self.w[key].shape}, expected {shape} "
                f"for the declared architecture"
            )

    def _conv(self, name: str, x: np.ndarray) -> np.ndarray:
        return _conv3x3(x, self.w[f"{name}.weight"], self.w[f"{name}.bias"])

    def _dense_block(self, prefix: str, x: np.ndarray) -> np.ndarray:
        feats = [x]
        for c in range(1, 5):
            feats.append(_lrelu(self._conv(f"{prefix}.conv{c}", np.concatenate(feats, axis=2))))
        out = self._conv(f"{prefix}.conv5", np.concatenate(feats, axis=2))
        return out * np.float32(0.2) + x

    def _rrdb(self, prefix: str, x: np.ndarray) -> np.ndarray:
        out = x
        for r in (1, 2, 3):
            out = self._dense_block(f"{prefix}.rdb{r}", out)
        return out * np.float32(0.2) + x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Raw forward pass on (H, W, C) float32; returns (H*scale, W*scale, C)."""
        art = self.artifact
        pad_h = pad_w = 0
        if art.scale == 2:
            pad_h, pad_w = x.shape[0] % 2, x.shape[1] % 2
            if pad_h or pad_w:
                x = np.pad(x, ((0, pad_h), (0, pad_w), (0, 0)), mode="symmetric")
            x = _pixel_unshuffle2(x)
        fea = self._conv("conv_first", x)
        body = fea
        for b in range(art.blocks):
            body = self._rrdb(f"body.{b}", body)
        fea = fea + self._conv("conv_body", body)
        fea = _lrelu(self._conv("conv_up1", _repeat2(fea)))
        fea = _lrelu(self._conv("conv_up2", _repeat2(fea)))
        out = self._conv("conv_last", _lrelu(self._conv("conv_hr", fea)))
        if pad_h or pad_w:
            out = out[: out.shape[0] - pad_h * art.scale, : out.shape[1] - pad_w * art.scale]
        return out


class NeuralUpscaler:
    """Executes one serialized generator per scale factor.

    Loading probes each network with a tiny constant input and rejects the
    artifact if the measured output ratio disagrees with the declared scale.
    A loaded instance holds only read-only arrays and is safe to share
    across workers.
    """

    def __init__(self, artifacts: Iterable[ModelArtifact | str | Path]):
        self._nets: dict[int, _Generator] = {}
        for a in artifacts:
            art = a if isinstance(a, ModelArtifact) else ModelArtifact.load(a)
            if art.scale in self._nets:
                raise ArtifactError(f"duplicate artifact for scale {art.scale}")
            net = _Generator(art)
            self._probe(net)
            self._nets[art.scale] = net
        if not self._nets:
            raise ArtifactError("no artifacts supplied")

    @staticmethod
    def _probe(net: _Generator) -> None:
        art = net.artifact
        probe = np.full((8, 8, art.channels), 0.5, dtype=np.float32)
        try:
            out = net.forward(probe)
        except Exception as e:
            raise InferenceError(f"probe inference failed for {art.path}: {e}") from e
        if out.shape[:2] != (8 * art.scale, 8 * art.scale):
            raise ScaleMismatchError(
                f"{art.path} declares scale {art.scale} but maps 8x8 -> "
                f"{out.shape[0]}x{out.shape[1]}"
            )

    @property
    def supported_factors(self) -> frozenset[int]:
        return frozenset(self._nets)

    @property
    def artifacts(self) -> dict[int, ModelArtifact]:
        return {s: n.artifact for s, n in self._nets.items()}

    def upscale(self, img: ImageTensor, f: int) -> ImageTensor:
        if f not in self._nets:
            raise ScaleMismatchError(
                f"no artifact for scale {f}; loaded scales: {sorted(self._nets)}"
            )
        net = self._nets[f]
        if img.channels != net.artifact.channels:
            raise InferenceError(
                f"artifact expects {net.artifact.channels} channel(s), image has {img.channels}"
            )
        try:
            out = net.forward(img.data.astype(np.float32))
        except ResolverError:
            raise
        except Exception as e:
            raise InferenceError(f"inference failed: {e}") from e
        if out.shape != (img.height * f, img.width * f, img.channels):
            raise InferenceError(f"network produced unexpected shape {out.shape}")
        return ImageTensor(_locked(np.clip(out.astype(np.float64), 0.0, 1.0)))

    def tiled_upscale(
        self, img: ImageTensor, f: int, tile: int = 256, overlap: int = 16
    ) -> ImageTensor:
        """Upscale in overlapping tiles to bound memory; each tile carries
        ``overlap`` pixels of context that are cropped away after inference,
        so seams deviate from the untiled result only by the network's
        long-range residue.
        """
        if tile <= 2 * overlap:
            raise ValueError(f"tile ({tile}) must exceed twice the overlap ({overlap})")
        if img.height <= tile and img.width <= tile:
            return self.upscale(img, f)
        out = np.empty((img.height * f, img.width * f, img.channels), dtype=np.float64)
        for y0 in range(0, img.height, tile):
            for x0 in range(0, img.width, tile):
                y1 = min(y0 + tile, img.height)
                x1 = min(x0 + tile, img.width)
                cy0, cx0 = max(0, y0 - overlap), max(0, x0 - overlap)
                cy1, cx1 = min(img.height, y1 + overlap), min(img.width, x1 + overlap)
                window = ImageTensor(_locked(img.data[cy0:cy1, cx0:cx1].copy()))
                up = self.upscale(window, f)
                oy, ox = (y0 - cy0) * f, (x0 - cx0) * f
                out[y0 * f : y1 * f, x0 * f : x1 * f] = up.data[
                    oy : oy + (y1 - y0) * f, ox : ox + (x1 - x0) * f
                ]
        return ImageTensor(_locked(np.clip(out, 0.0, 1.0)))


def neural_upscale(model: ModelArtifact | NeuralUpscaler | str | Path, img: ImageTensor, f: int) -> ImageTensor:
    """One-shot neural upscale; accepts a loaded backend or an artifact path."""
    backend = model if isinstance(model, NeuralUpscaler) else NeuralUpscaler([model])
    return backend.upscale(img, f)


def tiled_upscale(
    model: ModelArtifact | NeuralUpscaler | str | Path,
    img: ImageTensor,
    f: int,
    tile: int = 256,
    overlap: int = 16,
) -> ImageTensor:
    """Memory-bounded neural upscale for large inputs."""
    backend = model if isinstance(model, NeuralUpscaler) else NeuralUpscaler([model])
    return backend.tiled_upscale(img, f, tile=tile, overlap=overlap)
