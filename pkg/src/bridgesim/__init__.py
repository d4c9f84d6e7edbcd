"""Neural guided diffusion bridges: guided proposals, pCN and variational training."""

__version__ = "0.1.0"
