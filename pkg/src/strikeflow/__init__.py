"""Rectified-flow visuotactile policies on a synthetic match-striking task."""

__version__ = "0.1.0"
