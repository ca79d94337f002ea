"""Roundabout traffic micro-simulation with RL-trained autonomous-vehicle
ramp metering and zero-shot transfer evaluation."""

__version__ = "0.1.0"
