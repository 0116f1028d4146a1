"""Telematic management server: event system, decision-module kernel,
vehicle communication subsystem, RVTP codec, fleet/road data stores and a
fleet simulator."""

__version__ = "0.1.0"
