import json

from ._base import StageCommand


class Command(StageCommand):
    help = "generate phantom cases (or ingest external slices) and the dataset split"
    stage = "gen_data"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            "--from",
            dest="source",
            help="directory of <case>/image|label/<idx> tensor slices to ingest",
        )

    def extra_overrides(self, options) -> list:
        if options["source"]:
            return ["data_dir=%s" % json.dumps(options["source"])]
        return []
