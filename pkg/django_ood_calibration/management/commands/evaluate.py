from ._base import StageCommand


class Command(StageCommand):
    help = "pool calibration statistics into per-seed metric rows"
    stage = "evaluate"
