"""relmix: diverse relationship-sentence generation with expert mixtures."""

__version__ = "0.1.0"
