import logging

from hierbert.commands.common import output_dir
from hierbert.sweep import plan_sweep, run_sweep

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("sweep", help="Run the placement x concat x seed matrix")
    parser.add_argument("--plan-only", action="store_true", help="Print the cell plan and exit")
    parser.set_defaults(handler=run)


def run(args, config) -> int:
    if args.seed is not None:
        config = config.model_copy(update={"seeds": [args.seed]})
    cells = plan_sweep(config)
    for cell in cells:
        verdict = "ok" if cell.valid else f"rejected: {cell.reason}"
        print(f"{cell.seed}\t{cell.placement_label}\tpt={cell.pt_concat.value}\tft={cell.ft_concat.value}\t"
              f"{cell.task}\t{verdict}")
    if not args.plan_only:
        run_sweep(config, output_dir(args, config), cells)
    return 0
