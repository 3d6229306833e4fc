from django.core.management.base import BaseCommand, CommandError

from ...harness import ExperimentRun, load_config, run_stage
from ...misc import ConfigError, MissingArtifacts, StageFailed


class StageCommand(BaseCommand):
    """runs the pipeline stage named by ``stage``; flags mirror ExperimentConfig"""

    stage = None

    def add_arguments(self, parser):
        parser.add_argument("--config", help="experiment config (JSON)")
        parser.add_argument(
            "--run-dir",
            help="run directory, defaults to output_dir of the config",
        )
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a dotted config field, value parsed as JSON if possible",
        )
        parser.add_argument("--smoke", action="store_true", help="use the smoke preset")
        parser.add_argument(
            "--force", action="store_true", help="rerun even if the stage is up to date"
        )

    def extra_overrides(self, options) -> list:
        return []

    def get_config(self, options):
        try:
            return load_config(
                options["config"],
                options["overrides"] + self.extra_overrides(options),
                smoke=options["smoke"],
                run_dir=options["run_dir"],
            )
        except ConfigError as exc:
            raise CommandError("[config] %s (%s)" % (exc, exc.key or "-")) from exc
        except FileNotFoundError as exc:
            raise CommandError("[config] %s" % exc) from exc

    def run_stages(self, run: ExperimentRun, stages, force: bool):
        for stage in stages:
            try:
                executed = run_stage(run, stage, force=force)
            except (StageFailed, MissingArtifacts) as exc:
                raise CommandError(str(exc)) from exc
            if self.verbosity:
                self.stdout.write(
                    "%s: %s" % (stage, "done" if executed else "up to date")
                )

    def get_run(self, config, options) -> ExperimentRun:
        return ExperimentRun(config)

    def handle(self, *args, **options):
        self.verbosity = options["verbosity"]
        config = self.get_config(options)
        try:
            run = self.get_run(config, options)
        except ConfigError as exc:
            raise CommandError("[config] %s (%s)" % (exc, exc.key or "-")) from exc
        self.run_stages(run, [self.stage], options["force"])
