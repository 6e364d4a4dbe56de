"""Checkpoint-to-artifact conversion and numerical parity verification.

The exporter reads a trained generator checkpoint, infers the architecture
from the state-dict shapes, and writes the weights as a safetensors file
with the JSON sidecar the purification library's neural backend consumes.
Parity is then measured end to end: the exported artifact runs through that
backend and its output is compared against this package's own forward pass
(the reference runtime) on seeded inputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import save_file

from patchpurify import ImageTensor, ModelArtifact, NeuralUpscaler

from . import __version__
from .arch import RRDBNet

PARITY_TOLERANCE = 1e-3
PROBE_SIZE = 64


class ExportError(Exception):
    """Base for export tool failures."""


class CheckpointError(ExportError):
    """The checkpoint file could not be loaded or is not an RRDB generator."""


class ConversionError(ExportError):
    """The state dict could not be mapped onto the artifact layout."""


class ParityError(ExportError):
    """Exported artifact disagrees with the reference runtime."""


@dataclass(frozen=True)
class ArchSpec:
    scale: int
    channels: int
    features: int
    blocks: int
    growth: int


@dataclass(frozen=True)
class ParityReport:
    seed: int
    max_abs_diff: float
    location: tuple[int, int, int]  # (row, col, channel) of the worst pixel
    passed: bool


@dataclass(frozen=True)
class ExportManifest:
    source: str
    artifact: str
    scale: int
    parity: ParityReport
    status: str  # "ok" | "failed"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot load checkpoint {path}: {e}") from e
    if isinstance(blob, dict):
        for key in ("params_ema", "params", "state_dict"):
            if key in blob and isinstance(blob[key], dict):
                blob = blob[key]
                break
    if not isinstance(blob, dict) or "conv_first.weight" not in blob:
        raise CheckpointError(f"{path} does not contain an RRDB generator state dict")
    return {k: v for k, v in blob.items() if isinstance(v, torch.Tensor)}


def infer_arch(state: dict[str, torch.Tensor], scale: int) -> ArchSpec:
    """Derive the architecture from tensor shapes and cross-check the scale.

    A pixel-unshuffle (x2) generator takes channels*4 inputs at conv_first;
    the plain x4 generator takes the image channels directly.
    """
    if scale not in (2, 4):
        raise ConversionError(f"scale must be 2 or 4, got {scale}")
    try:
        features, in_total = state["conv_first.weight"].shape[:2]
        channels = state["conv_last.weight"].shape[0]
        growth = state["body.0.rdb1.conv1.weight"].shape[0]
    except KeyError as e:
        raise ConversionError(f"state dict is missing {e}") from e
    body_ids = {int(k.split(".")[1]) for k in state if k.startswith("body.")}
    if not body_ids or body_ids != set(range(max(body_ids) + 1)):
        raise ConversionError("body blocks are not contiguous")
    implied = 2 if in_total == channels * 4 else 4 if in_total == channels else None
    if implied is None:
        raise ConversionError(
            f"conv_first takes {in_total} channels which fits neither a x4 generator "
            f"({channels}) nor a pixel-unshuffle x2 generator ({channels * 4})"
        )
    if implied != scale:
        raise ConversionError(
            f"checkpoint structure implies scale {implied}, but scale {scale} was requested"
        )
    return ArchSpec(scale, int(channels), int(features), len(body_ids), int(growth))


def build_reference(state: dict[str, torch.Tensor], arch: ArchSpec) -> RRDBNet:
    net = RRDBNet(
        num_in_ch=arch.channels,
        num_out_ch=arch.channels,
        scale=arch.scale,
        num_feat=arch.features,
        num_block=arch.blocks,
        num_grow_ch=arch.growth,
    )
    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise ConversionError(f"state dict does not fit the inferred architecture: {e}") from e
    net.eval()
    return net


def reference_upscale(net: RRDBNet, img: np.ndarray) -> np.ndarray:
    """Reference-runtime forward: HWC float in [0, 1] to HWC, clipped."""
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    x = x.permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        y = net(x)
    out = y.squeeze(0).permute(1, 2, 0).numpy().astype(np.float64)
    return np.clip(out, 0.0, 1.0)


def seeded_input(seed: int, size: int = PROBE_SIZE, channels: int = 3) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(size, size, channels))


def measure_parity(
    backend: NeuralUpscaler, net: RRDBNet, scale: int, seed: int, channels: int
) -> ParityReport:
    probe = seeded_input(seed, channels=channels)
    theirs = backend.upscale(ImageTensor.from_array(probe), scale).data
    ours = reference_upscale(net, probe)
    diff = np.abs(theirs - ours)
    loc = np.unravel_index(int(np.argmax(diff)), diff.shape)
    max_diff = float(diff[loc])
    return ParityReport(seed, max_diff, tuple(int(i) for i in loc), max_diff <= PARITY_TOLERANCE)


def export(
    checkpoint: str | Path, scale: int, out: str | Path, seed: int = 0
) -> tuple[ModelArtifact, ExportManifest]:
    """Convert a checkpoint and verify the result end to end.

    The artifact and sidecar are always written; the manifest carries the
    parity outcome and ``status`` is "failed" when the probe disagrees with
    the reference runtime beyond tolerance.
    """
    checkpoint = Path(checkpoint)
    out = Path(out)
    state = load_checkpoint(checkpoint)
    arch = infer_arch(state, scale)
    net = build_reference(state, arch)

    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        tensors = {k: v.detach().numpy().astype(np.float32) for k, v in state.items()}
        save_file(tensors, str(out))
        out.with_suffix(".json").write_text(json.dumps({
            "scale": arch.scale,
            "channels": arch.channels,
            "version": f"sr-model-export/{__version__}:{checkpoint.stem}",
            "features": arch.features,
            "blocks": arch.blocks,
            "growth": arch.growth,
        }, indent=2))
    except OSError as e:
        raise ConversionError(f"cannot write artifact {out}: {e}") from e

    artifact = ModelArtifact.load(out)  # re-read through the consumer's loader
    backend = NeuralUpscaler([artifact])  # probe-verifies the declared scale
    parity = measure_parity(backend, net, arch.scale, seed, arch.channels)
    manifest = ExportManifest(
        source=str(checkpoint),
        artifact=str(out),
        scale=arch.scale,
        parity=parity,
        status="ok" if parity.passed else "failed",
    )
    out.with_suffix(".manifest.json").write_text(manifest.to_json())
    return artifact, manifest


def verify(
    artifact: str | Path, checkpoint: str | Path, seeds: tuple[int, ...] = (0, 1, 2)
) -> list[ParityReport]:
    """Recompute parity of an existing artifact on fresh seeded inputs.

    Pure read on both files; repeated calls return identical reports.
    """
    art = ModelArtifact.load(Path(artifact))
    backend = NeuralUpscaler([art])
    state = load_checkpoint(checkpoint)
    arch = infer_arch(state, art.scale)
    net = build_reference(state, arch)
    return [measure_parity(backend, net, art.scale, seed, arch.channels) for seed in seeds]
