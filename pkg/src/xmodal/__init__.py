"""Self-supervised cross-modal embedding retrieval at desk scale."""

__version__ = "0.1.0"
