from ._core import *  # noqa
from .misc import *  # noqa
