"""MAP-guided unsupervised and semi-supervised low-dose CT sinogram enhancement."""

__version__ = "0.1.0"
