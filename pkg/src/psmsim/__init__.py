"""psmsim: batched surgical-arm simulation and learning framework."""

from .config import VERSION as __version__

__all__ = ["__version__"]
