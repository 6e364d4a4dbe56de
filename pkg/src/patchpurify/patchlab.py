"""Synthetic attack injection and the evaluation harness.

Patches are seeded uniform-noise regions with exact ground-truth geometry, a
surrogate for gradient-crafted attacks that keeps the harness classifier-free
while preserving what the masking loop keys on: high-frequency statistics
that a natural-image prior cannot reconstruct. Sweeps over the masking
threshold and patch size reproduce the pipeline's trend behavior.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .imgcore import (
    DimensionError,
    ImageTensor,
    PixelMask,
    bicubic_upscale,
    crop,
    load_png,
    _locked,
)
from .purifier import IterationTrace, PurifyConfig, PurifyResult, purify, purify_plus
from .resolver import SuperResolver

PATCH_KINDS = ("localized", "distributed")
_PLACEMENT_ATTEMPTS = 10_000


class PatchSpecError(ValueError):
    """Patch geometry that cannot be realized on the target image."""


@dataclass(frozen=True)
class PatchSpec:
    """Geometry and noise parameters of a synthetic patch attack.

    ``sizes`` holds square side lengths: one entry shared by every region,
    or one entry per region. ``placement`` is "random" or a fixed (x, y)
    top-left corner (single-region specs only).
    """

    kind: str = "localized"
    sizes: tuple[int, ...] = (64,)
    count: int = 1
    amplitude: float = 1.0
    rng_seed: int = 0
    placement: str | tuple[int, int] = "random"

    def __post_init__(self):
        if self.kind not in PATCH_KINDS:
            raise PatchSpecError(f"kind must be one of {PATCH_KINDS}, got {self.kind!r}")
        if self.kind == "localized" and self.count != 1:
            raise PatchSpecError("a localized patch is a single contiguous region (count must be 1)")
        if self.kind == "distributed" and self.count < 2:
            raise PatchSpecError("a distributed patch needs count >= 2 regions")
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise PatchSpecError(f"sizes must be positive, got {self.sizes}")
        if len(sizes) not in (1, self.count):
            raise PatchSpecError(f"need 1 or {self.count} sizes, got {len(sizes)}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise PatchSpecError(f"amplitude must lie in [0, 1], got {self.amplitude}")
        if self.placement != "random":
            if self.count != 1:
                raise PatchSpecError("fixed placement applies only to single-region specs")
            x, y = self.placement  # type: ignore[misc]
            if x < 0 or y < 0:
                raise PatchSpecError(f"fixed placement must be non-negative, got {self.placement}")
        object.__setattr__(self, "sizes", sizes)

    def region_size(self, i: int) -> int:
        return self.sizes[i] if len(self.sizes) > 1 else self.sizes[0]


@dataclass(frozen=True)
class MaskMetrics:
    """How well a cumulative mask covers the ground-truth patch.

    ``patch_recall`` is None when the ground truth is empty (no patch to
    recall); both rates otherwise lie in [0, 1].
    """

    patch_recall: float | None
    clean_false_rate: float
    iterations: int


@dataclass(frozen=True)
class ReconErrorStats:
    """Mean squared reconstruction error split by patch membership."""

    mse_patch: float
    mse_clean: float

    @property
    def ratio(self) -> float | None:
        if self.mse_clean > 0.0:
            return self.mse_patch / self.mse_clean
        return None


def inject(img: ImageTensor, spec: PatchSpec) -> tuple[ImageTensor, PixelMask]:
    """Add seeded uniform noise over the spec's regions.

    Patch pixels become clip(clean + amplitude * U[-1, 1]); the returned
    ground-truth mask marks exactly the patched pixels, even at amplitude 0.
    """
    rng = np.random.default_rng(spec.rng_seed)
    h, w = img.height, img.width
    boxes: list[tuple[int, int, int]] = []  # (row, col, size)
    if spec.placement != "random":
        x, y = spec.placement  # type: ignore[misc]
        size = spec.region_size(0)
        if y + size > h or x + size > w:
            raise PatchSpecError(f"region {size}x{size} at ({x}, {y}) exceeds image bounds {w}x{h}")
        boxes.append((y, x, size))
    else:
        for i in range(spec.count):
            size = spec.region_size(i)
            if size > h or size > w:
                raise PatchSpecError(f"region size {size} exceeds image bounds {w}x{h}")
            for _ in range(_PLACEMENT_ATTEMPTS):
                r = int(rng.integers(0, h - size + 1))
                c = int(rng.integers(0, w - size + 1))
                if all(
                    r + size <= br or br + bs <= r or c + size <= bc or bc + bs <= c
                    for br, bc, bs in boxes
                ):
                    boxes.append((r, c, size))
                    break
            else:
                raise PatchSpecError(
                    f"could not place {spec.count} disjoint regions of sizes {spec.sizes} "
                    f"on a {w}x{h} image"
                )
    out = img.data.copy()
    truth = np.zeros((h, w), dtype=bool)
    for r, c, size in boxes:
        noise = spec.amplitude * rng.uniform(-1.0, 1.0, size=(size, size, img.channels))
        out[r : r + size, c : c + size] = np.clip(
            out[r : r + size, c : c + size] + noise, 0.0, 1.0
        )
        truth[r : r + size, c : c + size] = True
    return ImageTensor(_locked(out)), PixelMask(_locked(truth))


def eval_masking(ground_truth: PixelMask, cumulative: PixelMask, trace: IterationTrace) -> MaskMetrics:
    """Recall over patch pixels and false-mask rate over clean pixels."""
    if ground_truth.bits.shape != cumulative.bits.shape:
        raise DimensionError("mask dimensions differ")
    truth = ground_truth.bits
    cum = cumulative.bits
    n_truth = int(truth.sum())
    n_clean = truth.size - n_truth
    recall = float((truth & cum).sum() / n_truth) if n_truth else None
    false_rate = float((cum & ~truth).sum() / n_clean) if n_clean else 0.0
    return MaskMetrics(recall, false_rate, trace.total_iterations)


def recon_error_stats(
    original: ImageTensor, reconstructed: ImageTensor, truth: PixelMask
) -> ReconErrorStats:
    """Split the squared reconstruction error by ground-truth membership."""
    if not original.same_dims(reconstructed):
        raise DimensionError("image dimensions differ")
    if truth.bits.shape != (original.height, original.width):
        raise DimensionError("mask dimensions do not match images")
    se = (original.data - reconstructed.data) ** 2
    t = truth.bits
    mse_patch = float(se[t].mean()) if t.any() else 0.0
    mse_clean = float(se[~t].mean()) if (~t).any() else 0.0
    return ReconErrorStats(mse_patch, mse_clean)


# ---------------------------------------------------------------------------
# procedural backgrounds and workloads


def gradient_background(height: int, width: int, rng: np.random.Generator) -> ImageTensor:
    """Two-axis linear gradient: a bilinear blend of four random corner colors."""
    corners = rng.uniform(0.0, 1.0, size=(2, 2, 3))
    u = np.linspace(0.0, 1.0, height)[:, None, None]
    v = np.linspace(0.0, 1.0, width)[None, :, None]
    top = corners[0, 0] * (1.0 - v) + corners[0, 1] * v
    bottom = corners[1, 0] * (1.0 - v) + corners[1, 1] * v
    return ImageTensor(_locked(top * (1.0 - u) + bottom * u))


def smooth_background(height: int, width: int, rng: np.random.Generator) -> ImageTensor:
    """Value noise: a coarse random grid blown up smoothly to size."""
    cell = 16
    gh = -(-height // cell) + 3
    gw = -(-width // cell) + 3
    coarse = ImageTensor(_locked(rng.uniform(0.0, 1.0, size=(gh, gw, 3))))
    return crop(bicubic_upscale(coarse, cell), height, width)


_BACKGROUNDS: dict[str, Callable[[int, int, np.random.Generator], ImageTensor]] = {
    "gradient": gradient_background,
    "smooth": smooth_background,
}


@dataclass(frozen=True)
class WorkloadSpec:
    """A seeded batch of synthetic evaluation cases.

    Case ``i`` derives everything from ``seed + i``: the background stream
    and the patch's rng_seed, so runs are reproducible cell by cell.
    ``background`` is "gradient", "smooth", or a directory of PNGs to crop
    backgrounds from.
    """

    images: int = 50
    height: int = 224
    width: int = 224
    background: str = "gradient"
    patch: PatchSpec | None = PatchSpec()
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        patch = d.get("patch", {})
        if isinstance(patch, dict):
            p = dict(patch)
            if "sizes" in p:
                p["sizes"] = tuple(p["sizes"])
            if isinstance(p.get("placement"), list):
                p["placement"] = tuple(p["placement"])
            patch = PatchSpec(**p)
        return cls(
            images=int(d.get("images", 50)),
            height=int(d.get("height", 224)),
            width=int(d.get("width", 224)),
            background=str(d.get("background", "gradient")),
            patch=patch,
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_json_file(cls, path: str | Path) -> "WorkloadSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def case_seed(self, i: int) -> int:
        return self.seed + i

    def clean_image(self, i: int) -> tuple[str, ImageTensor]:
        k = self.case_seed(i)
        bg_rng = np.random.default_rng([k, 1])
        if self.background in _BACKGROUNDS:
            return f"synthetic:{self.background}:{k}", _BACKGROUNDS[self.background](
                self.height, self.width, bg_rng
            )
        corpus = sorted(Path(self.background).glob("*.png"))
        if not corpus:
            raise FileNotFoundError(f"no PNG backgrounds under {self.background}")
        path = corpus[int(bg_rng.integers(0, len(corpus)))]
        img = load_png(path)
        if img.height < self.height or img.width < self.width:
            raise DimensionError(f"background {path} smaller than {self.width}x{self.height}")
        r = (img.height - self.height) // 2
        c = (img.width - self.width) // 2
        return str(path), ImageTensor(
            _locked(img.data[r : r + self.height, c : c + self.width].copy())
        )

    def case(self, i: int) -> tuple[str, ImageTensor, ImageTensor, PixelMask]:
        """(case id, clean, adversarial, ground truth) for case ``i``."""
        name, clean = self.clean_image(i)
        if self.patch is None:
            return name, clean, clean, PixelMask.empty(self.height, self.width)
        spec = replace(self.patch, rng_seed=self.case_seed(i))
        adv, truth = inject(clean, spec)
        return name, clean, adv, truth


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    seed: int
    patch_size: int
    metrics: MaskMetrics
    result: PurifyResult


@dataclass(frozen=True)
class SweepRow:
    """Aggregate of one parameter cell of a sweep."""

    param: str
    value: float
    mean_recall: float | None
    mean_false_rate: float
    mean_iterations: float
    images: int

    def as_record(self) -> dict:
        return {
            self.param: self.value,
            "recall": self.mean_recall,
            "false_rate": self.mean_false_rate,
            "iterations": self.mean_iterations,
            "images": self.images,
        }


def run_case(
    workload: WorkloadSpec, i: int, cfg: PurifyConfig, g: SuperResolver
) -> CaseResult:
    case_id, _clean, adv, truth = workload.case(i)
    result = purify_plus(adv, cfg, g) if cfg.enhance else purify(adv, cfg, g)
    metrics = eval_masking(truth, result.mask, result.trace)
    size = max(workload.patch.sizes) if workload.patch is not None else 0
    return CaseResult(case_id, workload.case_seed(i), size, metrics, result)


def _run_cells(
    cells: Sequence[tuple[WorkloadSpec, int, PurifyConfig]],
    g: SuperResolver,
    workers: int,
) -> list[CaseResult]:
    if workers <= 1:
        return [run_case(wl, i, cfg, g) for wl, i, cfg in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: run_case(c[0], c[1], c[2], g), cells))


def _aggregate(param: str, value: float, results: Sequence[CaseResult]) -> SweepRow:
    recalls = [r.metrics.patch_recall for r in results if r.metrics.patch_recall is not None]
    mean_recall = float(np.mean(recalls)) if recalls else None
    mean_false = float(np.mean([r.metrics.clean_false_rate for r in results]))
    mean_iters = float(np.mean([r.metrics.iterations for r in results]))
    return SweepRow(param, value, mean_recall, mean_false, mean_iters, len(results))


def sweep_lambda(
    workload: WorkloadSpec,
    lambdas: Sequence[float],
    cfg: PurifyConfig,
    g: SuperResolver,
    workers: int = 1,
) -> list[SweepRow]:
    """Run the full workload at each masking threshold and aggregate."""
    rows = []
    for lam in lambdas:
        cells = [(workload, i, replace(cfg, threshold=lam)) for i in range(workload.images)]
        rows.append(_aggregate("lambda", float(lam), _run_cells(cells, g, workers)))
    return rows


def sweep_patch_size(
    sizes: Sequence[int],
    workload: WorkloadSpec,
    cfg: PurifyConfig,
    g: SuperResolver,
    workers: int = 1,
) -> list[SweepRow]:
    """Vary the patch side length; size 0 means no patch is injected."""
    rows = []
    for size in sizes:
        if size == 0:
            wl = replace(workload, patch=None)
        else:
            wl = replace(workload, patch=replace(workload.patch, sizes=(int(size),)))
        cells = [(wl, i, cfg) for i in range(wl.images)]
        rows.append(_aggregate("size", float(size), _run_cells(cells, g, workers)))
    return rows


def write_rows_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        if not rows:
            fh.write("")
            return
        names = list(rows[0].as_record())
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for row in rows:
            rec = row.as_record()
            if rec.get("recall") is None:
                rec["recall"] = ""
            writer.writerow(rec)


def rows_to_json(rows: Sequence[SweepRow]) -> str:
    return json.dumps([r.as_record() for r in rows], indent=2)
