import logging
import sys
from pathlib import Path

import click

from ..exceptions import BSeriesSDEError
from ..harness import run_invariant_drift
from ..utils import build_manifest, load_config, manifest_path, write_csv, write_manifest

logger = logging.getLogger(__name__)


@click.command(help="Track the drift of every invariant along one sampled path.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Experiment configuration (YAML) with one method and one step size.")
@click.option("--seed", type=int, default=None, help="Override driver.seed.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Override run.out (CSV path).")
@click.option("--log-level", default="INFO", type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']),
              help="Logging level. Default: INFO")
def invariants(config_path, seed, out, log_level):
    """Write t and the deviation of each invariant from its initial value as CSV."""
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True
    )
    try:
        config = load_config(config_path, overrides={"run": {"out": out}, "driver": {"seed": seed}})
        out_path = Path(config.run.out) if config.run.out else Path(config_path).with_name(f"{Path(config_path).stem}_drift.csv")
        frame = run_invariant_drift(config)
        write_csv(frame, out_path)
        write_manifest(build_manifest(config, resolved={"out": str(out_path)}), manifest_path(out_path))
    except BSeriesSDEError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(e.exit_code)
    except Exception as e:
        logger.exception("Unexpected failure")
        click.echo(f"Error: {e}", err=True)
        sys.exit(4)

    for column in frame.columns[1:]:
        click.echo(f"max |{column}| = {frame[column].abs().max():.3e}")
    click.echo(f"results: {out_path}")
