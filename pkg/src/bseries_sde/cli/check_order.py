import logging
import sys

import click

from ..exceptions import BSeriesSDEError, CapabilityError
from ..methods import TABLEAUX, detect_deterministic_order, resolve_method
from ..trees import MAX_TREE_ORDER

logger = logging.getLogger(__name__)


@click.command(name="check-order", help="Detect the deterministic order of a Runge-Kutta tableau from its elementary weights.")
@click.option("--method", "method_name", required=True, help=f"Tableau name: {', '.join(TABLEAUX)}.")
@click.option("--max-order", default=8, show_default=True, type=int, help=f"Highest tree order checked (at most {MAX_TREE_ORDER}).")
@click.option("--log-level", default="WARNING", type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']),
              help="Logging level. Default: WARNING")
def check_order(method_name, max_order, log_level):
    """Print p_d, p_mu = floor(p_d / 2) and the first tree whose order condition fails."""
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True
    )
    try:
        spec = resolve_method(method_name)
        if spec.kind != "rk":
            raise CapabilityError(
                f"{method_name} has no Butcher tableau; measure its order empirically with "
                f"'bseries-sde convergence' instead."
            )
        report = detect_deterministic_order(spec.tableau, max_order)
    except BSeriesSDEError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(e.exit_code)
    except Exception as e:
        logger.exception("Unexpected failure")
        click.echo(f"Error: {e}", err=True)
        sys.exit(4)

    click.echo(f"{method_name}: deterministic order {report.deterministic_order}, stochastic order {report.stochastic_order}")
    if report.failing_tree is not None:
        click.echo(f"first failing tree: {report.failing_tree} (residual {report.residual:.3e})")
    else:
        click.echo(f"all order conditions hold up to order {max_order}")
