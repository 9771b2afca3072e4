import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from config import KINDS, load_app_config, load_run_config
from errors import ConfigError, DisentangleError
from experiment_runner import PROBES, SPACES, ExperimentRunner
from run_manager import RunManager

logger = logging.getLogger(__name__)

CLASSIFIERS = ("z", "x", "oracle", "random")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--dataset", help="directory written by a previous gen run")
    common.add_argument("--checkpoint", help="model checkpoint written by train")
    common.add_argument("--preset", choices=["stocks", "synth"])
    common.add_argument("--lambda", dest="lam", type=float, help="adversarial weight (0 disables the adversary)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="disentangle", description="Two-step adversarial disentanglement experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate or window a dataset")
    gen.add_argument("kind", choices=KINDS)
    gen.add_argument("--periods", type=int, help="CAPM periods")
    gen.add_argument("--assets", type=int, help="CAPM assets per period")
    gen.add_argument("--image-size", type=int, help="synthetic image side length")

    for name, help_text in (("train", "run both training stages"),
                            ("gradcheck", "compare analytic and numeric gradients")):
        cmd = sub.add_parser(name, parents=[common], help=help_text)
        cmd.add_argument("--kind", choices=KINDS)

    probe = sub.add_parser("probe", parents=[common], help="evaluate a trained checkpoint")
    probe.add_argument("name", choices=PROBES)
    probe.add_argument("--kind", choices=KINDS)
    probe.add_argument("--space", choices=SPACES, default="Z")
    probe.add_argument("--target", help="probe target (label, beta, rho, vol1, vol5, er_m, latent, ...)")
    probe.add_argument("--k", type=int, help="components, neighbors or swap sources")

    backtest = sub.add_parser("backtest", parents=[common], help="run the straddle backtest")
    backtest.add_argument("--kind", choices=KINDS)
    backtest.add_argument("--classifier", choices=CLASSIFIERS, default="z")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    kind = getattr(args, "kind", None)
    return {
        "kind": kind,
        "seed": args.seed,
        "out": args.out,
        "train.lam": args.lam,
        "preset": args.preset,
        "dataset": args.dataset,
        "checkpoint": args.checkpoint,
        "capm.n_periods": getattr(args, "periods", None),
        "capm.n_assets": getattr(args, "assets", None),
        "synth.image_size": getattr(args, "image_size", None),
    }


def run_command(args: argparse.Namespace) -> int:
    app = load_app_config()
    cfg = load_run_config(args.config, overrides_from_args(args))
    logging.basicConfig(level=args.log_level or app.log_level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "backtest" and args.classifier == "z" and not cfg.checkpoint:
        raise ConfigError("the z classifier needs --checkpoint")

    manager = RunManager.for_command(cfg, args.command, app.output_root)
    manager.write_config_echo(cfg)
    runner = ExperimentRunner(cfg, app)
    logger.info("Running %s for %s (seed %d) into %s", args.command, cfg.kind, cfg.seed, manager.out_dir)

    if args.command == "gen":
        runner.gen(manager)
    elif args.command == "train":
        runner.train(manager)
    elif args.command == "probe":
        runner.probe(manager, args.name, args.space, args.target, args.k)
    elif args.command == "backtest":
        runner.backtest(manager, args.classifier)
    elif args.command == "gradcheck":
        if not runner.gradcheck(manager)["passed"]:
            return 1
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return run_command(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DisentangleError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
