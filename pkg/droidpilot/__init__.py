from droidpilot.actions import *
from droidpilot.errors import *

__version__ = "0.1.0"
