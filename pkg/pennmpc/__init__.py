"""penn-mpc: ensemble vehicle dynamics, Jensen-Renyi uncertainty and MPPI exploration/deployment."""

__version__ = "0.1.0"
