from . import _version
from .step import Step

__version__ = _version.version


__all__ = ["Step", "__version__"]
