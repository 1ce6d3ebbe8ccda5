import logging
import os
from pathlib import Path

import click
import dotenv

from . import __version__

# Load environment variables from ~/.bseries-sde/.env if file exists
config_dir = Path.home() / ".bseries-sde"
env_file = config_dir / ".env"

if env_file.exists():
    dotenv.load_dotenv(env_file)

logger = logging.getLogger(__name__)

THREADS_ENV = "BSERIES_SDE_THREADS"


def env_threads() -> int:
    value = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(value)
    except ValueError:
        raise click.BadParameter(f"{THREADS_ENV} must be an integer, got '{value}'.")
    return max(threads, 1)


@click.group(
    help="B-series integrators with random step sizes: order checks, tree tables and convergence experiments."
)
@click.version_option(__version__, prog_name="bseries-sde")
@click.pass_context
def cli(ctx):
    """Main CLI group for bseries-sde."""
    ctx.ensure_object(dict)
    ctx.obj["THREADS"] = env_threads()


from .cli.check_order import check_order
from .cli.convergence import convergence
from .cli.invariants import invariants
from .cli.trees import trees

cli.add_command(trees)
cli.add_command(check_order)
cli.add_command(convergence)
cli.add_command(invariants)


def main():
    cli()


if __name__ == "__main__":
    main()
