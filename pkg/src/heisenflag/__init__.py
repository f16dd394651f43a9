"""Numerical flag Hardy space toolkit on discretized Heisenberg groups."""

__version__ = "0.1.0"

from .group import (  # noqa: F401
    GroupContext, HPoint, mul, inv, dilate, gauge_norm, koranyi_norm, distance,
)
from .fields import GridSpec, GridField, Line  # noqa: F401
