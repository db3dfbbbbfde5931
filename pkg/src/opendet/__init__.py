"""Multi-view 3D detection with object-wise depth and position embeddings,
built on a small numpy autodiff engine and a synthetic scene generator."""

__version__ = "0.1.0"
