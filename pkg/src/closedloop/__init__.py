"""Closed-loop lifecycle orchestration over a pluggable issue tracker."""

__version__ = "0.1.0"
