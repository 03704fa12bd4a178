"""2D multi-agent racing: simulator, potential-field planner, residual policy learning."""

__version__ = "0.1.0"
