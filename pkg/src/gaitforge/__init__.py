"""gaitforge: planar gait synthesis and neural imitation training."""

__version__ = "0.1.0"
