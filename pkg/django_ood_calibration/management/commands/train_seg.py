from ._base import StageCommand


class Command(StageCommand):
    help = "train the segmentation network f_theta per seed"
    stage = "train_seg"
