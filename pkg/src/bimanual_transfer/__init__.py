"""Unimanual-to-bimanual policy transfer on a gridworld test bed."""
__version__ = "0.1.0"
