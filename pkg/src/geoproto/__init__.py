"""Few-shot segmentation with ordinal distance-to-boundary shape priors.

Numpy-only reverse-mode autodiff, exact distance transforms, grid-pooled
prototypes with geometry-aware enrichment, and a synthetic episode sampler.
"""

__version__ = "0.1.0"
