"""Knowledge-aware recommender with low/high-order aggregation and cross-order contrastive training."""

__version__ = "0.1.0"
