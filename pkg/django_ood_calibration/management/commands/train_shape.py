from ._base import StageCommand


class Command(StageCommand):
    help = "train the shape prior on the calibration split"
    stage = "train_shape"
