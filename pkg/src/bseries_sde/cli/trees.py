import logging
import sys

import click

from ..exceptions import BSeriesSDEError
from ..trees import MAX_TREE_ORDER, count_by_order, enumerate_trees, format_alpha, tree_stats

logger = logging.getLogger(__name__)


@click.command(help="Print every rooted tree up to an order with its rho, alpha and gamma.")
@click.option("--max-order", default=4, show_default=True, type=int, help=f"Largest tree order (at most {MAX_TREE_ORDER}).")
@click.option("--log-level", default="WARNING", type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']),
              help="Logging level. Default: WARNING")
def trees(max_order, log_level):
    """Table of canonical trees grouped by order, followed by per-order counts."""
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True
    )
    try:
        enumerated = enumerate_trees(max_order)
    except BSeriesSDEError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(e.exit_code)
    except Exception as e:
        logger.exception("Unexpected failure")
        click.echo(f"Error: {e}", err=True)
        sys.exit(4)

    for tree in enumerated:
        stats = tree_stats(tree)
        click.echo(f"{tree}, {stats.order}, {format_alpha(stats.alpha)}, {stats.gamma}")
    for order, count in sorted(count_by_order(enumerated).items()):
        click.echo(f"# order {order}: {count}")
