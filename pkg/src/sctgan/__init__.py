"""MR to synthetic-CT toolkit: volumes, rigid registration, a numpy cGAN,
mesh-based evaluation and a procedural forearm phantom."""

__version__ = "0.1.0"
