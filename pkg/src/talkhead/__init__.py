"""Speech-driven 3D facial animation with disentangled style and content."""

from .config import GlobalConfig, load_config
from .errors import ConfigError, DataIOError, NumericError, TalkHeadError

__all__ = ["GlobalConfig", "load_config", "ConfigError", "DataIOError", "NumericError", "TalkHeadError"]
__version__ = "0.1.0"
