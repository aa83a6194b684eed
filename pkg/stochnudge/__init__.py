"""
StochNudge - nudging data assimilation for 2D Navier-Stokes with noisy observations
"""

__version__ = "0.1.0"
