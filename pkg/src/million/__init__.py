"""Meta-reinforcement learning from language instructions."""

__version__ = "0.1.0"
