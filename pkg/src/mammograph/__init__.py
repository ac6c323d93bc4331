"""Multi-view graph reasoning for mammogram mass detection.

Builds pseudo-landmark graphs from breast geometry, runs bipartite
(ipsilateral) and inception (bilateral) graph convolutions, and fuses the
propagated node features back into the examined view for a small detection
harness evaluated on synthetic multi-view phantoms.
"""

__version__ = "0.1.0"
