"""Viewpoint-invariant visual servoing: simulator, policies, training and evaluation."""

from .scene import DEFAULT_ENV, Domain, EnvConfig, Pool
from .policy import REACTIVE, RECURRENT, init_params

__version__ = "0.1.0"

__all__ = ["DEFAULT_ENV", "Domain", "EnvConfig", "Pool", "RECURRENT", "REACTIVE", "init_params"]
