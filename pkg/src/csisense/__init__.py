"""Multistatic passive-target sensing over simulated cellular links."""

__version__ = "0.1.0"

from .channel import Receiver, Scenario
from .frame import CsiFrame
from .geometry import Point2D, Target

__all__ = ["Receiver", "Scenario", "CsiFrame", "Point2D", "Target", "__version__"]
