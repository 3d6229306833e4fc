from ...harness import ExperimentRun
from ._base import StageCommand


class Command(StageCommand):
    help = "calibrate the test suites and store per-slice and pooled statistics"
    stage = "calibrate"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            "--kind",
            action="append",
            choices=["proposed", "lts", "ts", "alea", "uc", "global_ts", "uncalibrated"],
            help="calibrator, repeatable (default: all configured); the stored config keeps all",
        )

    def get_run(self, config, options) -> ExperimentRun:
        return ExperimentRun(config, only=options["kind"] or ())
