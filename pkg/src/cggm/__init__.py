"""Traffic dispersion graphs, conditional graph generation for class balancing, and GNN detection."""

__version__ = "0.1.0"
