"""soupstock: data-free model merging with pseudogradient meta-optimization."""

__version__ = "0.1.0"
