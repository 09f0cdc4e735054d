"""Dual-camera compressive hyperspectral imaging toolkit.

Forward simulation, TeX (temperature / emissivity / texture) synthesis, a
linear-time selective scan with a hand-written backward pass, cross-modal
scanning blocks and a small physics-informed reconstruction network.
"""

from .core import *  # noqa: F401,F403
from .csmb import *  # noqa: F401,F403
from .forward import *  # noqa: F401,F403
from .metrics import *  # noqa: F401,F403
from .net import *  # noqa: F401,F403
from .ssm import *  # noqa: F401,F403
from .tex import *  # noqa: F401,F403
from .train import *  # noqa: F401,F403

__version__ = "0.1.0"
