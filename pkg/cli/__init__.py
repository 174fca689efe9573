"""
Command line interface for the sparse boundary-aware captioner
"""

from .dispatch import dispatch, main
from .parser import COMMANDS, build_parser

__all__ = ['dispatch', 'main', 'COMMANDS', 'build_parser']
