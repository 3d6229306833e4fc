from ._base import StageCommand


class Command(StageCommand):
    help = "write table, ablation CSVs and figure panels"
    stage = "report"
