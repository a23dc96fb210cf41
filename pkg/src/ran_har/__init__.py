"""Recurrent attention network for recognising and locating activities in weakly labelled sensor windows."""

__version__ = "0.1.0"
