import argparse
import logging
import sys
from pathlib import Path

from medimp import __version__
from medimp.cli.commands import COMMANDS, RunContext
from medimp.config import get_settings, load_run_config
from medimp.exceptions import ConfigError, MedimpError

logger = logging.getLogger("medimp")


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # repeated on every subparser so the flags work before or after the subcommand
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=default, help="global seed (overrides MEDIMP_SEED and the config)")
    parser.add_argument("--out", type=Path, default=default, help="output directory (default: config output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medimp",
        description="Contrastive pretraining of 3D volumes against generated clinical prompts.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        _global_options(p, suppress=True)
        return p

    add("synth", "generate the synthetic cohort")
    add("prompts", "write generated prompts as JSONL")
    add("pretrain", "fit both encoders contrastively and save a checkpoint")
    p = add("embed", "export image embeddings as CSV")
    p.add_argument("--augmented", type=int, default=None, metavar="N", help="augmented variants per exam")
    p = add("eval", "downstream creatinine-horizon evaluation")
    p.add_argument("--cv", type=_positive, default=None, metavar="K", help="K-fold cross-validation on the train split")
    p.add_argument("--untrained", action="store_true", help="use a freshly initialized image encoder")
    p.add_argument("--shuffles", type=_positive, default=None, metavar="N", help="also run N shuffled-label controls")
    p = add("plot", "t-SNE scatter plots of the exported embeddings")
    p.add_argument("--variables", nargs="+", choices=["exam", "gfr", "creat", "donor_age"], default=None)
    p = add("gradcheck", "finite-difference checks of every backward rule")
    p.add_argument("--configs", type=_positive, default=20, metavar="N", help="random configurations per check")
    return parser


def _context(args: argparse.Namespace) -> RunContext:
    settings = get_settings()
    config = load_run_config(args.config)
    if args.seed is not None:
        seed = args.seed
    elif settings.SEED is not None:
        seed = settings.SEED
    else:
        seed = config.seed
    config = config.model_copy(update={"seed": seed})
    return RunContext(config=config, seed=seed, out=args.out or config.output_dir)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if getattr(args, "cv", None) is not None and args.cv < 2:
            raise ConfigError(f"--cv needs at least 2 folds, got {args.cv}")
        ctx = _context(args)
        logger.info("Running %s with seed %d, output in %s", args.command, ctx.seed, ctx.out)
        return COMMANDS[args.command](ctx, args)
    except MedimpError as e:
        logger.error("%s failed: %s", args.command, e.detail)
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected error in %s", args.command)
        print(f"Unexpected error: {e}", file=sys.stderr)
        return 1
