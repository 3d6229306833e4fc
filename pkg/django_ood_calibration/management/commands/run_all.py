from ...harness import STAGE_ORDER, ExperimentRun
from ._base import StageCommand


class Command(StageCommand):
    help = "run every pipeline stage in order, skipping the up to date ones"

    def handle(self, *args, **options):
        self.verbosity = options["verbosity"]
        run = ExperimentRun(self.get_config(options))
        self.run_stages(run, STAGE_ORDER, options["force"])
        if self.verbosity:
            self.stdout.write("run directory: %s" % run.root)
