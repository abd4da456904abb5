"""Calibration of agent-based SIR models: BiLSTM inverse mapping vs. likelihood-free MCMC."""

__version__ = "0.1.0"
