"""Hypergraph-enhanced click-through-rate prediction over temporal
multi-modal interaction logs."""

__version__ = "0.1.0"
