"""Long-tail-aware post-processing of NWP heavy-rainfall forecasts.

The package wires together: rainfall grids and intensity classes
(``grids``), dataset plumbing and a synthetic long-tailed generator
(``data``), the dual-path segmentation model (``model``), the
imbalance-aware loss system (``losses``), training and experiment
variants (``training``), categorical/neighborhood verification
(``metrics``), feature-separability diagnostics (``features``),
class-conditional conformal sets (``conformal``), integrated-gradients
attribution (``attribution``), and the ``stormtail`` CLI (``cli``).
"""

__version__ = "0.1.0"

from .grids import ClassField, RainGrid, ThresholdSchema, classify, event_mask

__all__ = [
    "__version__",
    "RainGrid",
    "ClassField",
    "ThresholdSchema",
    "classify",
    "event_mask",
]
