"""``medsynth`` command line.

Exit codes: 0 success, 1 usage or config error (including refusing to
overwrite outputs), 2 training divergence, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .errors import CheckpointError, ConfigError, DivergenceError, ImageFormatError, ManifestError, \
    OutputExistsError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML config file, or the name of a shipped config "
                                     f"({', '.join(pipeline.shipped_configs())})")
    p.add_argument("--workdir", help="root for default input and output locations")
    p.add_argument("--seed", type=int, help="root seed; every component derives its own subseed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set stage1.epochs=10 (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite outputs of an earlier run")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="medsynth", description="Two-stage GAN synthesis of paired mask/photo datasets.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    p = add("gen-toy", "generate the toy paired dataset and a masks-only view of its train split")
    p.add_argument("--out", help="dataset directory (default WORKDIR/data)")

    for name, what in (("train-stage1", "a masks-only"), ("train-stage2", "a paired")):
        p = add(name, f"train the {name[-6:]} GAN on {what} manifest")
        p.add_argument("--manifest")
        p.add_argument("--out")

    p = add("train-unet", "train a u-net segmenter on a paired manifest")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--source", choices=("real", "synthetic"), default="real",
                   help="which default manifest and output directory to use")

    p = add("synthesize", "sample Stage-I masks and translate them into photos")
    p.add_argument("--stage1", help="stage-1 generator checkpoint")
    p.add_argument("--stage2", help="stage-2 generator checkpoint")
    p.add_argument("--count", type=int, help="pairs to emit (default synthesize.count)")
    p.add_argument("--out")

    p = add("evaluate", "F1 of both u-nets, histogram KL pair, memorization audit")
    p.add_argument("--real")
    p.add_argument("--synthetic")
    p.add_argument("--unet-real")
    p.add_argument("--unet-synthetic")
    p.add_argument("--stage1", help="stage-1 generator for the memorization audit")
    p.add_argument("--out")

    p = add("baseline-single-gan", "train one DCGAN straight on photos and report its KL")
    p.add_argument("--manifest")
    p.add_argument("--out")

    add("run", "gen-toy through evaluate (or the baseline, in single-baseline mode)")
    return parser


def _config(args) -> pipeline.PipelineConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workdir is not None:
        overrides.append(f"workdir={json.dumps(args.workdir)}")
    return pipeline.load_config(args.config, overrides)


def dispatch(args) -> dict:
    cfg = _config(args)
    c, f = args.command, args.force
    if c == "gen-toy":
        return pipeline.gen_toy(cfg, args.out, f)
    if c == "train-stage1":
        return pipeline.train_stage1_cmd(cfg, args.manifest, args.out, f)
    if c == "train-stage2":
        return pipeline.train_stage2_cmd(cfg, args.manifest, args.out, f)
    if c == "train-unet":
        return pipeline.train_unet_cmd(cfg, args.manifest, args.out, f, synthetic=args.source == "synthetic")
    if c == "synthesize":
        return pipeline.synthesize_cmd(cfg, args.stage1, args.stage2, args.out, args.count, f)
    if c == "evaluate":
        return pipeline.evaluate_cmd(cfg, args.real, args.synthetic, args.unet_real, args.unet_synthetic,
                                     args.stage1, args.out, f)
    if c == "baseline-single-gan":
        return pipeline.baseline_cmd(cfg, args.manifest, args.out, f)
    return pipeline.run_pipeline(cfg, f)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except (OutputExistsError, ConfigError, ManifestError) as exc:
        print(f"medsynth: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"medsynth: training diverged at epoch {exc.epoch}, batch {exc.batch}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, CheckpointError, ImageFormatError) as exc:
        print(f"medsynth: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
