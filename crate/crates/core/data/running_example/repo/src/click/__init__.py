from .types import Choice, IntRange
from .utils import echo

__all__ = ["Choice", "IntRange", "echo"]
