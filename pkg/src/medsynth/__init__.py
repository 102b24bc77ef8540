"""Two-stage GAN synthesis of paired segmentation datasets, on a small numpy autodiff engine."""

__version__ = "0.1.0"
