# ecfse: linear equivalent-circuit state estimation with RTU and PMU measurements
from ecfse.__about__ import __version__

__all__ = ["__version__"]
