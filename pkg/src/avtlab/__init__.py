"""Desk-scale audiovisual cross-task transfer laboratory."""

__version__ = "0.1.0"
