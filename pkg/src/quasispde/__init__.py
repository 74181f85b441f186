"""Numerics for quasilinear singular SPDEs whose coefficients are correlated with the noise."""

__version__ = "0.1.0"
