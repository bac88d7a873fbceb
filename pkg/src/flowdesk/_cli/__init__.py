"""
The 'flowdesk' command-line interface.
"""

from .main import handle_args

__all__ = ["handle_args"]
