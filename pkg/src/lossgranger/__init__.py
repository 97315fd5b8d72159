"""Loss-estimator based Granger-causal feature importance."""

__version__ = "0.1.0"
