import json

from ...misc import CorruptionKind, Severity
from ._base import StageCommand


class Command(StageCommand):
    help = "write corrupted copies of the test cases"
    stage = "corrupt"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            "--kind",
            action="append",
            choices=[k.value for k in CorruptionKind if k is not CorruptionKind.IDENTITY],
            help="corruption kind, repeatable",
        )
        parser.add_argument(
            "--severity",
            action="append",
            choices=[s.value for s in Severity],
            help="severity preset, repeatable",
        )
        parser.add_argument("--seed", type=int, help="corruption seed")

    def extra_overrides(self, options) -> list:
        overrides = []
        if options["kind"]:
            overrides.append("corruption.kinds=%s" % json.dumps(options["kind"]))
        if options["severity"]:
            overrides.append("corruption.severities=%s" % json.dumps(options["severity"]))
        if options["seed"] is not None:
            overrides.append("corruption.seed=%d" % options["seed"])
        return overrides
