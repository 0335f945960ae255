"""RPC bias alignment, stereo DSM fusion, true orthorectification, OSM label
registration and multi-view label fusion for satellite imagery."""

from .errors import (DegenerateCameraError, DependencyError, IllConditionedError,
                     NoSignalError, NonConvergenceError, OrthoforgeError, ValidationError)
from .grid import Extent, Grid, LocalFrame
from .rpc import BiasCorrection, BiasedCamera, RpcCamera, Tile, partition_aoi

__version__ = "0.1.0"
