"""Hybrid quantum-classical AFQMC: shadow-tomography trials on a simulated device."""

__version__ = "0.1.0"
