"""Arrhythmia beat classification from WFDB ECG records.

The pipeline runs: band-pass filtering, ensemble R-peak detection, adaptive
beat segmentation, per-beat features, HRV/graph augmentation, feature
refinement (MI + RFE + PCA), SMOTE-ENN balancing and small linear models.
"""

__version__ = "0.1.0"

AAMI_CLASSES = ("N", "S", "V", "F", "Q")
