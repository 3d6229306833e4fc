from ._base import StageCommand


class Command(StageCommand):
    help = "train every configured calibrator per seed"
    stage = "train_calib"
