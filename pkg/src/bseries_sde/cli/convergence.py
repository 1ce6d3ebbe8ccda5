import logging
import sys
from pathlib import Path

import click

from ..exceptions import AcceptanceError, BSeriesSDEError
from ..harness import check_acceptance, run_ms_convergence, run_weak_convergence
from ..utils import build_manifest, load_config, manifest_path, report_frame, write_csv, write_manifest

logger = logging.getLogger(__name__)


def _default_out(config_path: str, mode: str) -> Path:
    return Path(config_path).with_name(f"{Path(config_path).stem}_{mode}.csv")


@click.command(help="Run a mean-square or weak convergence study from a YAML experiment file.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Experiment configuration (YAML).")
@click.option("--mode", type=click.Choice(["ms", "weak"]), default=None, help="Override run.mode.")
@click.option("--samples", type=int, default=None, help="Override run.samples.")
@click.option("--seed", type=int, default=None, help="Override driver.seed.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Override run.out (CSV path).")
@click.option("--log-level", default="INFO", type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']),
              help="Logging level. Default: INFO")
@click.pass_context
def convergence(ctx, config_path, mode, samples, seed, out, log_level):
    """Write the convergence CSV and manifest, then print the fitted slope per method."""
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True
    )
    try:
        config = load_config(config_path, overrides={
            "run": {"mode": mode, "samples": samples, "out": out},
            "driver": {"seed": seed},
        })
        threads = config.run.threads or (ctx.obj or {}).get("THREADS", 1)
        out_path = Path(config.run.out) if config.run.out else _default_out(config_path, config.run.mode)
        logger.info(f"Running {config.run.mode} convergence from {config_path} with {threads} thread(s)")

        runner = run_ms_convergence if config.run.mode == "ms" else run_weak_convergence
        report = runner(config, threads=threads)

        write_csv(report_frame(report), out_path)
        manifest = build_manifest(config, resolved={
            "out": str(out_path),
            "step_sizes": config.run.step_ladder(),
        })
        write_manifest(manifest, manifest_path(out_path))

        for fit in report.fits:
            click.echo(f"{fit.method} [{fit.family}]: slope {fit.slope:.3f} +/- {fit.residual:.3f} ({fit.points} points)")
        click.echo(f"results: {out_path}")

        violations = check_acceptance(report, config.acceptance.slopes)
        if violations:
            raise AcceptanceError("slope band violated: " + "; ".join(violations))
    except BSeriesSDEError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(e.exit_code)
    except Exception as e:
        logger.exception("Unexpected failure")
        click.echo(f"Error: {e}", err=True)
        sys.exit(4)
