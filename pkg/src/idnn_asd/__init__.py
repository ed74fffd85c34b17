"""Unsupervised anomalous-sound detection with frame-interpolation networks.

Log-Mel features, sliding windows, six small dense detectors (AE, VAE,
IDNN, VIDNN, PDNN, VPDNN), ROC-AUC evaluation and a synthetic
machine-sound generator.
"""

__version__ = "0.1.0"
