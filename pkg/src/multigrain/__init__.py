"""Joint classification and retrieval embeddings with GeM pooling on a small numpy autodiff core."""

__version__ = "0.1.0"
