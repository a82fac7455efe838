"""Director: hierarchical world-model agent with a Visual Pin Pad benchmark."""

from .agent import Director
from .config import RunConfig, load_config
from .envs import PinPad, make_env
from .training import run_eval, run_train

__all__ = ["Director", "PinPad", "RunConfig", "load_config", "make_env", "run_eval", "run_train"]
__version__ = "0.1.0"
