import argparse
import sys

from icode_rca import configure_logger
from icode_rca.benchmark import BenchmarkRunner, audit
from icode_rca.config import load_config, load_suite
from icode_rca.errors import ArtifactError, IcodeError
from icode_rca.processor import CHECKPOINT_FILE, Processor
from icode_rca.run_result import RunResult
from icode_rca.trainer_factory import TrainerFactory


def _add_config_arguments(parser):
    parser.add_argument(
        "--config", help="Path to a JSON experiment configuration (defaults apply to missing keys)"
    )
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override one configuration value, e.g. --set train.epochs=50 (repeatable)"
    )


def _audit(output_dir):
    result = RunResult("audit")
    mismatches = audit(output_dir)
    result.summary = {"mismatches": mismatches}
    if mismatches:
        result.set_error(IcodeError(f"{len(mismatches)} summary numbers could not be re-derived"))
    return result


def main(argv=None):
    """Main entry point for the ICODE experiment harness."""
    processor = Processor(TrainerFactory())
    logger = configure_logger(__name__)

    parser = argparse.ArgumentParser(description="ICODE anomaly detection and root cause analysis")

    subparsers = parser.add_subparsers(
        title="Commands", dest="command"
    )

    # Subparser for simulating the three-period dataset
    simulate_parser = subparsers.add_parser(
        "simulate", help="Simulate normal, cyber and measurement periods"
    )
    _add_config_arguments(simulate_parser)
    simulate_parser.add_argument(
        "--output", help="Dataset directory (default: <output_dir>/dataset)"
    )
    simulate_parser.set_defaults(
        func=lambda args: processor.simulate(load_config(args.config, args.overrides), args.output)
    )

    # Subparser for training on the normal period
    train_parser = subparsers.add_parser(
        "train", help="Train ICODE on the normal period of a dataset"
    )
    _add_config_arguments(train_parser)
    train_parser.add_argument(
        "dataset", help="Dataset directory written by 'simulate'"
    )
    train_parser.add_argument(
        "--output", help="Directory for the checkpoint and loss log (default: <output_dir>)"
    )
    train_parser.set_defaults(
        func=lambda args: processor.train(args.dataset, load_config(args.config, args.overrides), args.output)
    )

    # Subparser for detection, classification and localization
    analyze_parser = subparsers.add_parser(
        "analyze", help="Detect, classify and localize anomalies with a trained model"
    )
    _add_config_arguments(analyze_parser)
    analyze_parser.add_argument(
        "dataset", help="Dataset directory written by 'simulate'"
    )
    analyze_parser.add_argument(
        "checkpoint", help=f"Model checkpoint ({CHECKPOINT_FILE}) written by 'train'"
    )
    analyze_parser.add_argument(
        "--output", help="Directory for reports (default: <output_dir>/analysis)"
    )
    analyze_parser.set_defaults(
        func=lambda args: processor.analyze(
            args.dataset, args.checkpoint, load_config(args.config, args.overrides), args.output
        )
    )

    # Subparser for running a whole suite of cells
    benchmark_parser = subparsers.add_parser(
        "benchmark", help="Run simulate, train and analyze over systems x alphas x seeds"
    )
    _add_config_arguments(benchmark_parser)
    benchmark_parser.set_defaults(
        func=lambda args: BenchmarkRunner().run(load_suite(args.config, args.overrides))
    )

    # Subparser for re-deriving a benchmark summary
    audit_parser = subparsers.add_parser(
        "audit", help="Recompute a benchmark summary from its per-segment records"
    )
    audit_parser.add_argument(
        "output_dir", help="Benchmark output directory"
    )
    audit_parser.set_defaults(func=lambda args: _audit(args.output_dir))

    args = parser.parse_args(argv)

    if hasattr(args, "func"):
        try:
            result = args.func(args)
        except IcodeError as e:
            logger.error(f"{args.command} failed: {e}")
            result = RunResult(args.command).set_error(e)
        except OSError as e:
            logger.error(f"{args.command} failed: {e}")
            result = RunResult(args.command).set_error(ArtifactError(str(e)))
        print(result)
        return result
    else:
        parser.print_help()


def run():
    result = main()
    sys.exit(result.result_code() if result is not None else 2)


if __name__ == "__main__":
    run()
