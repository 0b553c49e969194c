"""``gst`` command line entry point."""
import argparse
import logging
import sys

from .config import PipelineConfig
from .errors import GSTError
from .pipeline import Pipeline

log = logging.getLogger("gstransform")

COMMANDS = ("embed", "build-taxonomy", "train", "transform", "evaluate", "pipeline")


def build_parser():
    p = argparse.ArgumentParser(prog="gst", description="Instruction-guided transforms of generic text embeddings.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--no-summarize", action="store_true", help="cluster raw-text embeddings instead of summaries")
        s.add_argument("--directed-labels", action="store_true", help="ask the LLM for k labels directly")
        s.add_argument("--k", type=int, help="number of summary clusters")
        s.add_argument("--sample-size", type=int)
        s.add_argument("--margin", type=float)
        s.add_argument("--d-out", type=int)
        s.add_argument("--fda", action="store_true", help="fit the Fisher discriminant baseline instead")
        s.add_argument("--output-dir", help="override output_dir")
        if name == "transform":
            s.add_argument("--report-distances", nargs=3, metavar="ID", help="print cosine distances before/after")
        if name == "evaluate":
            s.add_argument("--generic", action="store_true", help="score the untransformed store")
    s = sub.add_parser("synth", help="write a synthetic two-aspect fixture with a ready config")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    return p


def config_from_args(args):
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    if args.no_summarize:
        cfg.taxonomy.summarize = False
    if args.directed_labels:
        cfg.taxonomy.directed_labels = True
    if args.k is not None:
        cfg.taxonomy.k = args.k
    if args.sample_size is not None:
        cfg.taxonomy.sample_size = args.sample_size
    if args.margin is not None:
        cfg.train.margin = args.margin
    if args.d_out is not None:
        cfg.train.d_out = args.d_out
    if args.fda:
        cfg.train.method = "fda"
    if args.output_dir:
        cfg.output_dir = args.output_dir
    # re-run field validation on the overridden values
    return PipelineConfig.from_dict(cfg.to_dict())


def run(args):
    if args.command == "synth":
        from .synthetic import write_fixture

        print(write_fixture(args.out, n=args.n, seed=args.seed))
        return
    pipe = Pipeline(config_from_args(args))
    if args.command == "embed":
        pipe.embed()
    elif args.command == "build-taxonomy":
        pipe.build_taxonomy()
    elif args.command == "train":
        pipe.train()
    elif args.command == "transform":
        pipe.transform(report_distances=args.report_distances)
    elif args.command == "evaluate":
        pipe.evaluate("generic" if args.generic else "transformed")
    else:
        pipe.run()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except GSTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
