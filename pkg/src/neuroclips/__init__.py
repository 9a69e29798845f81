"""Desk-scale fMRI-to-video reconstruction on a synthetic world."""
from .checkpoint import VERSION as __version__
from .config import RunConfig, load_config
from .data import WorldSpec, load_dataset, make_dataset
from .errors import (ConfigError, ContractViolation, CorruptFile, Divergence, InvalidArgument, NeuroClipsError,
                     NotReady, SingularSystem)

__all__ = [
    "__version__", "RunConfig", "load_config", "WorldSpec", "load_dataset", "make_dataset", "ConfigError",
    "ContractViolation", "CorruptFile", "Divergence", "InvalidArgument", "NeuroClipsError", "NotReady",
    "SingularSystem",
]
