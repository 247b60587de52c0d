from .mock import MockBackend
from .http import HttpBackend

__all__ = ["MockBackend", "HttpBackend"]
