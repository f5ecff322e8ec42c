import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .exceptions import AxisForgeError, ConfigError
from .utils import write_jsonl

logger = logging.getLogger("axisforge.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_ORACLE = 3


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="json config file")
    parser.add_argument("--seed", type=int, help="global seed (u64)")
    parser.add_argument("--deterministic", action="store_true",
                        help="single worker everywhere")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key, repeatable")
    parser.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="axisforge", description="tri-axis diffusion pose pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("render-dataset", help="render a synthetic benchmark")
    _common(p)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=100)

    p = sub.add_parser("train", help="train the MLP denoiser")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--limit", type=int, help="train on the first N records only")
    p.add_argument("--quiet", action="store_true", help="no progress bar")

    p = sub.add_parser("infer", help="guided sampling, extraction and pose recovery")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--no-guidance", action="store_true")
    p.add_argument("--analytic", action="store_true",
                   help="use a Gaussian score field centred on the ground-truth render")
    p.add_argument("--clean-query", action="store_true",
                   help="condition on the undegraded query")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("eval", help="score predictions")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--baseline", help="second predictions directory for a paired delta")
    p.add_argument("--split", default="test")

    p = sub.add_parser("ablation", help="guided against unguided inference on one split")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--analytic", action="store_true")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int)
    p.add_argument("--min-gain", type=float, help="required Reproj gain in percentage points")

    p = sub.add_parser("oracle", help="run the self-check suite")
    _common(p)
    p.add_argument("--quick", action="store_true", help="fewer poses per geometry check")
    p.add_argument("--only", action="append", help="run only the named oracle, repeatable")
    p.add_argument("--perturb-omega", type=float, default=0.0,
                   help="break the symmetry of omega by this amount")

    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config, args.set)
    seeds = config.seeds
    if args.seed is not None:
        seeds = replace(seeds, seed=args.seed)
    if args.deterministic:
        seeds = replace(seeds, deterministic=True)
    return replace(config, seeds=seeds)


def _require_out(args, default: str) -> Path:
    return Path(args.out or default)


def run(args) -> int:
    config = resolve_config(args)

    if args.command == "render-dataset":
        from .dataset import cmd_render_dataset
        out = _require_out(args, "dataset")
        manifest = cmd_render_dataset(config, args.n_train, args.n_test, out)
        print(f"wrote {len(manifest['records'])} records to {out}")
        return EXIT_OK

    if args.command == "train":
        from .pipeline import cmd_train
        summary = cmd_train(config, args.dataset, _require_out(args, "run"),
                            resume=args.resume, progress=not args.quiet and sys.stderr.isatty(),
                            limit=args.limit)
        print(f"loss {summary['initial_loss']:.4g} -> {summary['final_loss']:.4g}, "
              f"checkpoint {summary['checkpoint']}")
        return EXIT_OK

    if args.command == "infer":
        from .pipeline import cmd_infer
        doc = cmd_infer(config, args.dataset, _require_out(args, "predictions"),
                        checkpoint=args.checkpoint, split=args.split,
                        guidance_on=not args.no_guidance, analytic=args.analytic,
                        clean_query=args.clean_query, limit=args.limit)
        failed = sum(1 for r in doc["records"] if r["error"] is not None)
        print(f"{len(doc['records'])} predictions ({doc['mode']}), {failed} failed")
        return EXIT_OK

    if args.command == "eval":
        from .pipeline import cmd_eval
        result = cmd_eval(config, args.predictions, args.dataset, args.out,
                          baseline_dir=args.baseline, split=args.split)
        for key, value in result["summary"].items():
            print(f"{key:>18}: {value}")
        if "delta" in result:
            for key, value in result["delta"].items():
                print(f"{'delta ' + key:>24}: {value}")
        return EXIT_OK

    if args.command == "ablation":
        from .pipeline import MIN_GUIDANCE_GAIN_PP, cmd_ablation
        min_gain = MIN_GUIDANCE_GAIN_PP if args.min_gain is None else args.min_gain
        result = cmd_ablation(config, args.dataset, _require_out(args, "ablation"),
                              checkpoint=args.checkpoint, analytic=args.analytic,
                              split=args.split, limit=args.limit, min_gain_pp=min_gain)
        print(f"reproj rate guided {result['guided_reproj_rate']:.3f}, "
              f"unguided {result['unguided_reproj_rate']:.3f}, "
              f"gain {result['gain_pp']:.1f} pp (need {min_gain:.1f})")
        return EXIT_OK if result["passed"] else EXIT_ORACLE

    if args.command == "oracle":
        from .oracle import cmd_oracle
        try:
            report = cmd_oracle(config, quick=args.quick,
                                omega_perturbation=args.perturb_omega, only=args.only)
        except ValueError as exc:
            print(f"axisforge: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(report.format())
        if args.out:
            write_jsonl(Path(args.out) / "oracle.jsonl", report.to_records())
        return EXIT_OK if report.passed else EXIT_ORACLE

    return EXIT_USAGE


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_USAGE
    except AxisForgeError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
