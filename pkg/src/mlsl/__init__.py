"""Multi-level self-training for domain-adaptive semantic segmentation.

Patch-aggregated pseudo-labels, pseudo weak-labels from source class-size
statistics, a small numpy segmenter with a multi-label head, and the
alternating generate/adapt loop, plus a synthetic domain-shift benchmark.
"""

from mlsl.grid import IGNORE, AccumVolume, Rect

__version__ = "0.1.0"

__all__ = ["IGNORE", "AccumVolume", "Rect", "__version__"]
