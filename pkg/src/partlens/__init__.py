"""Part-based explanations for image classifiers split into a frozen feature
extractor and a trainable feed-forward head."""

__version__ = "0.1.0"
