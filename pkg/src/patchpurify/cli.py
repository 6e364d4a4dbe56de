"""Batch command-line front end: purify images, evaluate on synthetic
workloads, and run parameter sweeps.

Every flag can also be supplied through a flat ``key=value`` config file
(``--config``); explicit flags win over file values. Exit codes separate
I/O failures (3), invalid configuration (2), and backend failures (4).
"""

from __future__ import annotations

import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import click

from . import patchlab
from .imgcore import ImageTensor, load_png, save_mask_png, save_png
from .purifier import ConfigError, PurifyConfig, PurifyError, purify_plus
from .resolver import (
    BicubicUpscaler,
    NeuralUpscaler,
    ResolverError,
    SuperResolver,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BACKEND = 4


class CliError(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


@dataclass(frozen=True)
class ImageRunRecord:
    input: str
    output: str
    iterations: int
    stop_reason: str
    masked: int
    ms: float
    error: str | None = None


@dataclass(frozen=True)
class RunReport:
    """Per-image outcomes plus latency aggregates for a batch run."""

    records: tuple[ImageRunRecord, ...]

    @property
    def successes(self) -> int:
        return sum(1 for r in self.records if r.error is None)

    @property
    def failures(self) -> int:
        return len(self.records) - self.successes

    def aggregate(self) -> dict:
        lat = [r.ms for r in self.records if r.error is None]
        return {
            "images": len(self.records),
            "successes": self.successes,
            "failures": self.failures,
            "mean_ms": statistics.fmean(lat) if lat else None,
            "median_ms": statistics.median(lat) if lat else None,
        }

    def to_dict(self) -> dict:
        return {
            "images": [
                {
                    "input": r.input,
                    "output": r.output,
                    "iterations": r.iterations,
                    "stop_reason": r.stop_reason,
                    "masked": r.masked,
                    "ms": r.ms,
                    "error": r.error,
                }
                for r in self.records
            ],
            "aggregate": self.aggregate(),
        }


def _write_report(report_dict: dict, rows: list[dict], path: Path, fmt: str) -> None:
    if fmt == "json":
        path.write_text(json.dumps(report_dict, indent=2))
        return
    import csv as _csv

    with path.open("w", newline="") as fh:
        if not rows:
            return
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# config-file merging: flags win, file fills in the rest


def _parse_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = path.read_text()
    except OSError as e:
        raise CliError(f"cannot read config file {path}: {e}", EXIT_IO)
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{ln}: expected key=value, got {raw!r}", EXIT_CONFIG)
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(ctx: click.Context, config: str | None) -> None:
    if not config:
        return
    values = _parse_config_file(Path(config))
    for param in ctx.command.params:
        name = param.name
        if name is None or name == "config":
            continue
        key = name if name in values else name.rstrip("_")  # --lambda maps to lambda_
        if key not in values:
            continue
        if ctx.get_parameter_source(name) == click.core.ParameterSource.COMMANDLINE:
            continue
        raw = values[key]
        if param.multiple:
            converted = tuple(
                param.type.convert(v.strip(), param, ctx) for v in raw.split(",") if v.strip()
            )
        elif isinstance(param.type, click.types.BoolParamType) or param.is_flag:
            converted = raw.lower() in ("1", "true", "yes", "on")
        else:
            converted = param.type.convert(raw, param, ctx)
        ctx.params[name] = converted


def _build_config(params: dict) -> PurifyConfig:
    try:
        return PurifyConfig(
            threshold=params["lambda_"],
            epsilon=params["epsilon"],
            epsilon_mode=params["epsilon_mode"],
            max_iters=params["max_iters"],
            mask_scale=params["scale"],
            enhance_scale=params["enhance_scale"],
            enhance=params["enhance"],
            ordering=params["ordering"],
        )
    except ConfigError as e:
        raise CliError(str(e), EXIT_CONFIG)


class _TiledBackend:
    """Routes upscales through tiling so large inputs stay memory-bounded."""

    def __init__(self, inner: NeuralUpscaler, tile: int, overlap: int):
        self.inner = inner
        self.tile = tile
        self.overlap = overlap

    @property
    def supported_factors(self) -> frozenset[int]:
        return self.inner.supported_factors

    def upscale(self, img: ImageTensor, f: int) -> ImageTensor:
        return self.inner.tiled_upscale(img, f, tile=self.tile, overlap=self.overlap)


def _build_backend(params: dict) -> SuperResolver:
    if params["backend"] == "classical":
        return BicubicUpscaler()
    models = params.get("model") or ()
    if not models:
        raise CliError("--backend neural requires at least one --model artifact", EXIT_CONFIG)
    try:
        backend = NeuralUpscaler(models)
    except ResolverError as e:
        raise CliError(str(e), EXIT_BACKEND)
    if params.get("tile"):
        if params["tile"] <= 2 * params["overlap"]:
            raise CliError("--tile must exceed twice --overlap", EXIT_CONFIG)
        return _TiledBackend(backend, params["tile"], params["overlap"])
    return backend


def _purify_one(
    src: Path, dst: Path, cfg: PurifyConfig, backend: SuperResolver,
    mask_out: Path | None, trace_out: Path | None,
) -> ImageRunRecord:
    t0 = time.perf_counter()
    img = load_png(src)
    result = purify_plus(img, cfg, backend)
    save_png(result.image, dst)
    if mask_out is not None:
        save_mask_png(result.mask, mask_out)
    if trace_out is not None:
        trace_out.write_text(result.trace.to_json(indent=2))
    ms = (time.perf_counter() - t0) * 1000.0
    return ImageRunRecord(
        str(src), str(dst), result.trace.total_iterations,
        result.trace.stop_reason, result.mask.popcount, ms,
    )


def _shared_options(fn):
    opts = [
        click.option("--config", type=click.Path(), default=None,
                     help="Flat key=value file supplying any flag; flags override it."),
        click.option("--lambda", "lambda_", type=float, default=0.7, show_default=True,
                     help="Masking threshold on per-pixel reconstruction distance."),
        click.option("--epsilon", type=float, default=4.0, show_default=True,
                     help="Stop once fewer pixels than this are newly masked."),
        click.option("--epsilon-mode", type=click.Choice(["count", "fraction"]),
                     default="count", show_default=True),
        click.option("--max-iters", type=int, default=30, show_default=True),
        click.option("--scale", type=int, default=4, show_default=True,
                     help="Rescaling factor of the masking loop."),
        click.option("--enhance-scale", type=int, default=2, show_default=True),
        click.option("--enhance/--no-enhance", default=False, show_default=True,
                     help="Run the final up-down enhancement pass."),
        click.option("--ordering", type=click.Choice(["down_up", "up_down"]),
                     default="down_up", show_default=True),
        click.option("--backend", type=click.Choice(["classical", "neural"]),
                     default="classical", show_default=True),
        click.option("--model", multiple=True, type=click.Path(),
                     help="Model artifact (.safetensors with JSON sidecar); repeatable."),
        click.option("--tile", type=int, default=0,
                     help="Tile size for memory-bounded neural inference (0 = untiled)."),
        click.option("--overlap", type=int, default=16, show_default=True),
        click.option("--workers", type=int, default=4, show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(package_name="patchpurify")
def main():
    """Strip adversarial patches from images by iterative rescale-and-mask."""


@main.command("purify")
@click.option("--in", "src", required=True, type=click.Path(), help="Input PNG or directory.")
@click.option("--out", "dst", required=True, type=click.Path(), help="Output PNG or directory.")
@click.option("--mask-out", type=click.Path(), default=None,
              help="Write the cumulative mask PNG here (directory for batch runs).")
@click.option("--trace", "trace_out", type=click.Path(), default=None,
              help="Write the iteration trace JSON here (directory for batch runs).")
@click.option("--report", type=click.Choice(["csv", "json"]), default="json", show_default=True)
@click.option("--report-out", type=click.Path(), default=None,
              help="Write the batch run report here.")
@_shared_options
@click.pass_context
def cmd_purify(ctx, src, dst, mask_out, trace_out, report, report_out, **params):
    """Purify one PNG or every PNG in a directory."""
    _apply_config(ctx, ctx.params["config"])
    cfg = _build_config(ctx.params)
    backend = _build_backend(ctx.params)
    src = Path(ctx.params["src"])
    dst = Path(ctx.params["dst"])
    mask_out = Path(ctx.params["mask_out"]) if ctx.params["mask_out"] else None
    trace_out = Path(ctx.params["trace_out"]) if ctx.params["trace_out"] else None

    if not src.exists():
        raise CliError(f"input not found: {src}", EXIT_IO)

    if src.is_file():
        try:
            rec = _purify_one(src, dst, cfg, backend, mask_out, trace_out)
        except (PurifyError, ResolverError) as e:
            raise CliError(str(e), EXIT_BACKEND)
        except ConfigError as e:
            raise CliError(str(e), EXIT_CONFIG)
        except OSError as e:
            raise CliError(str(e), EXIT_IO)
        click.echo(f"{src} -> {dst}: {rec.masked} px masked in {rec.iterations} "
                   f"iteration(s), {rec.ms:.0f} ms")
        return

    inputs = sorted(src.glob("*.png"))
    if not inputs:
        raise CliError(f"no PNG files under {src}", EXIT_IO)
    dst.mkdir(parents=True, exist_ok=True)
    for d in (mask_out, trace_out):
        if d is not None:
            d.mkdir(parents=True, exist_ok=True)

    def job(p: Path) -> ImageRunRecord:
        try:
            return _purify_one(
                p, dst / p.name, cfg, backend,
                mask_out / p.name if mask_out else None,
                (trace_out / p.name).with_suffix(".json") if trace_out else None,
            )
        except Exception as e:  # recorded per image; batch continues
            return ImageRunRecord(str(p), str(dst / p.name), 0, "error", 0, 0.0, str(e))

    with ThreadPoolExecutor(max_workers=max(1, ctx.params["workers"])) as pool:
        records = tuple(pool.map(job, inputs))
    report_obj = RunReport(records)
    agg = report_obj.aggregate()
    click.echo(f"{agg['successes']}/{agg['images']} images purified"
               + (f", mean {agg['mean_ms']:.0f} ms" if agg["mean_ms"] is not None else ""))
    if ctx.params["report_out"]:
        rows = [
            {"input": r.input, "output": r.output, "iterations": r.iterations,
             "stop_reason": r.stop_reason, "masked": r.masked, "ms": r.ms, "error": r.error}
            for r in records
        ]
        _write_report(report_obj.to_dict(), rows, Path(ctx.params["report_out"]), ctx.params["report"])
    if report_obj.failures:
        first = next(r for r in records if r.error is not None)
        code = EXIT_BACKEND if "backend" in (first.error or "") else EXIT_IO
        raise CliError(f"{report_obj.failures} image(s) failed; first: {first.error}", code)


def _load_workload(path: str | None, seed: int | None) -> patchlab.WorkloadSpec:
    if not path:
        raise CliError("--workload is required", EXIT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise CliError(f"workload file not found: {p}", EXIT_CONFIG)
    try:
        wl = patchlab.WorkloadSpec.from_json_file(p)
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise CliError(f"invalid workload file {p}: {e}", EXIT_CONFIG)
    if seed is not None:
        wl = replace(wl, seed=seed)
    return wl


@main.command("evaluate")
@click.option("--workload", type=click.Path(), required=False,
              help="Workload spec JSON (images, background, patch, seed).")
@click.option("--seed", type=int, default=None, help="Override the workload seed.")
@click.option("--report", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.option("--report-out", type=click.Path(), default=None, required=False)
@_shared_options
@click.pass_context
def cmd_evaluate(ctx, workload, seed, report, report_out, **params):
    """Inject synthetic patches, purify, and score masking quality."""
    _apply_config(ctx, ctx.params["config"])
    cfg = _build_config(ctx.params)
    backend = _build_backend(ctx.params)
    wl = _load_workload(ctx.params["workload"], ctx.params["seed"])

    def job(i: int) -> tuple[patchlab.CaseResult, float]:
        t0 = time.perf_counter()
        r = patchlab.run_case(wl, i, cfg, backend)
        return r, (time.perf_counter() - t0) * 1000.0

    try:
        with ThreadPoolExecutor(max_workers=max(1, ctx.params["workers"])) as pool:
            outcomes = list(pool.map(job, range(wl.images)))
    except (PurifyError, ResolverError) as e:
        raise CliError(str(e), EXIT_BACKEND)
    except patchlab.PatchSpecError as e:
        raise CliError(str(e), EXIT_CONFIG)

    rows = [
        {
            "input": r.case_id,
            "size": r.patch_size,
            "seed": r.seed,
            "recall": r.metrics.patch_recall,
            "false_rate": r.metrics.clean_false_rate,
            "iterations": r.metrics.iterations,
            "ms": ms,
        }
        for r, ms in outcomes
    ]
    recalls = [row["recall"] for row in rows if row["recall"] is not None]
    mean_recall = sum(recalls) / len(recalls) if recalls else float("nan")
    mean_false = sum(row["false_rate"] for row in rows) / len(rows)
    mean_iters = sum(row["iterations"] for row in rows) / len(rows)
    click.echo(f"{len(rows)} case(s): mean recall {mean_recall:.4f}, "
               f"mean false rate {mean_false:.5f}, mean iterations {mean_iters:.2f}")
    if ctx.params["report_out"]:
        _write_report({"cases": rows}, rows, Path(ctx.params["report_out"]), ctx.params["report"])


def _parse_grid(raw: str | None) -> list[float] | None:
    if raw is None:
        return None
    items = [v.strip() for v in raw.split(",")]
    return [float(v) for v in items if v]


@main.command("sweep")
@click.option("--workload", type=click.Path(), required=False)
@click.option("--seed", type=int, default=None)
@click.option("--lambdas", type=str, default=None,
              help="Comma-separated masking thresholds to sweep.")
@click.option("--sizes", type=str, default=None,
              help="Comma-separated patch side lengths to sweep (0 = no patch).")
@click.option("--report", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.option("--report-out", type=click.Path(), default=None)
@_shared_options
@click.pass_context
def cmd_sweep(ctx, workload, seed, lambdas, sizes, report, report_out, **params):
    """Sweep the masking threshold or the patch size over a workload."""
    _apply_config(ctx, ctx.params["config"])
    cfg = _build_config(ctx.params)
    backend = _build_backend(ctx.params)
    lam_grid = _parse_grid(ctx.params["lambdas"])
    size_grid = _parse_grid(ctx.params["sizes"])
    if (lam_grid is None) == (size_grid is None):
        raise CliError("pass exactly one of --lambdas or --sizes", EXIT_CONFIG)
    wl = _load_workload(ctx.params["workload"], ctx.params["seed"])
    workers = max(1, ctx.params["workers"])
    try:
        if lam_grid is not None:
            rows = patchlab.sweep_lambda(wl, lam_grid, cfg, backend, workers=workers)
        else:
            rows = patchlab.sweep_patch_size([int(s) for s in size_grid], wl, cfg, backend,
                                             workers=workers)
    except (PurifyError, ResolverError) as e:
        raise CliError(str(e), EXIT_BACKEND)
    except (patchlab.PatchSpecError, ConfigError) as e:
        raise CliError(str(e), EXIT_CONFIG)
    for row in rows:
        rec = "-" if row.mean_recall is None else f"{row.mean_recall:.4f}"
        click.echo(f"{row.param}={row.value:g}: recall {rec}, "
                   f"false {row.mean_false_rate:.5f}, iterations {row.mean_iterations:.2f}")
    if ctx.params["report_out"]:
        out = Path(ctx.params["report_out"])
        if ctx.params["report"] == "json":
            out.write_text(patchlab.rows_to_json(rows))
        else:
            patchlab.write_rows_csv(rows, out)


if __name__ == "__main__":
    main()
