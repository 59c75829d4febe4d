from .errors import GridModelError
from .logger import get_logger

__all__ = ["GridModelError", "get_logger"]
