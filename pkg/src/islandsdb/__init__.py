"""Shared-nothing OLTP engine and deployment lab for multisocket topologies."""

__version__ = "0.1.0"
