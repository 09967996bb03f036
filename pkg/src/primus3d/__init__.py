"""primus3d: pure-transformer 3D segmentation on a minimal autodiff engine."""

__version__ = "0.1.0"
