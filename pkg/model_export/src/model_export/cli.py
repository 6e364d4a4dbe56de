"""Command line for the export tool: ``export``, ``verify`` and a
``demo-checkpoint`` helper that fabricates a seeded random checkpoint of the
supported architecture for pipelines without access to trained weights."""

from __future__ import annotations

from pathlib import Path

import click
import torch

from patchpurify.resolver import ResolverError

from .arch import RRDBNet
from .export import (
    CheckpointError,
    ConversionError,
    ExportError,
    export as run_export,
    verify as run_verify,
)

EXIT_USAGE = 2
EXIT_LOAD = 3
EXIT_CONVERT = 4
EXIT_PARITY = 5


class CliError(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


@click.group()
@click.version_option(package_name="sr-model-export")
def main():
    """Convert SR generator checkpoints to portable artifacts and verify them."""


@main.command("export")
@click.option("--checkpoint", required=True, type=click.Path(), help="Trained generator .pth.")
@click.option("--scale", required=True, type=click.Choice(["2", "4"]))
@click.option("--out", required=True, type=click.Path(),
              help="Target .safetensors path; sidecar and manifest are written next to it.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed of the parity probe input.")
def cmd_export(checkpoint, scale, out, seed):
    """Convert a checkpoint and probe-verify the exported artifact."""
    try:
        artifact, manifest = run_export(checkpoint, int(scale), out, seed=seed)
    except CheckpointError as e:
        raise CliError(str(e), EXIT_LOAD)
    except (ConversionError, ResolverError) as e:
        raise CliError(str(e), EXIT_CONVERT)
    except ExportError as e:
        raise CliError(str(e), EXIT_PARITY)
    click.echo(f"{manifest.source} -> {manifest.artifact} (x{manifest.scale}, "
               f"version {artifact.version})")
    click.echo(f"parity: max abs diff {manifest.parity.max_abs_diff:.2e} on seed "
               f"{manifest.parity.seed} -> {manifest.status}")
    if manifest.status != "ok":
        raise CliError("export marked failed: parity beyond tolerance", EXIT_PARITY)


@main.command("verify")
@click.option("--artifact", required=True, type=click.Path())
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--seeds", type=str, default="0,1,2", show_default=True,
              help="Comma-separated probe input seeds.")
def cmd_verify(artifact, checkpoint, seeds):
    """Recompute parity of an artifact against its source checkpoint."""
    try:
        seed_list = tuple(int(s) for s in seeds.split(",") if s.strip())
    except ValueError:
        raise CliError(f"bad --seeds value: {seeds!r}", EXIT_USAGE)
    if not seed_list:
        raise CliError("--seeds must name at least one seed", EXIT_USAGE)
    try:
        reports = run_verify(artifact, checkpoint, seed_list)
    except CheckpointError as e:
        raise CliError(str(e), EXIT_LOAD)
    except (ConversionError, ResolverError) as e:
        raise CliError(str(e), EXIT_CONVERT)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        status = "ok" if r.passed else "MISMATCH"
        click.echo(f"seed {r.seed}: max abs diff {r.max_abs_diff:.2e} at "
                   f"(row {r.location[0]}, col {r.location[1]}, ch {r.location[2]}) -> {status}")
    if failed:
        raise CliError(f"{len(failed)}/{len(reports)} probes beyond tolerance", EXIT_PARITY)


@main.command("demo-checkpoint")
@click.option("--scale", required=True, type=click.Choice(["2", "4"]))
@click.option("--out", required=True, type=click.Path())
@click.option("--features", type=int, default=32, show_default=True)
@click.option("--blocks", type=int, default=4, show_default=True)
@click.option("--growth", type=int, default=16, show_default=True)
@click.option("--channels", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_demo_checkpoint(scale, out, features, blocks, growth, channels, seed):
    """Write a seeded randomly initialized checkpoint (for tests and demos)."""
    torch.manual_seed(seed)
    net = RRDBNet(num_in_ch=channels, num_out_ch=channels, scale=int(scale),
                  num_feat=features, num_block=blocks, num_grow_ch=growth)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"params_ema": net.state_dict()}, out)
    click.echo(f"wrote {out} (x{scale}, features {features}, blocks {blocks}, growth {growth})")


if __name__ == "__main__":
    main()
