"""Adaptive input-scale selection for video object detection.

The package generates optimal-scale labels from detector losses, trains a
small convolutional scale regressor on deep features, runs the adaptive
scale video loop and benchmarks it against fixed, random and multi-scale
policies on synthetic video corpora.
"""

__version__ = "0.1.0"
