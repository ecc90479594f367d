"""Simplified imbalance baselines.

Neither is a replication of a published method; both are labelled as
"inspired by" in every output.
"""
from __future__ import annotations

import numpy as np

RESAMPLE_LABEL = "resample (simplified, inspired by bootstrapping CNN)"
COSTSENS_LABEL = "costsens (simplified, inspired by cost-sensitive CNN)"


def resample_weights(labels: np.ndarray) -> np.ndarray:
    """Per-example sampling weights, normalised to sum to 1.

    An example's weight is 1 / (frequency of its rarest positive attribute).
    Rows with no positive attribute are weighted by the frequency of the
    all-negative group instead.
    """
    labels = np.asarray(labels, dtype=bool)
    n = len(labels)
    if n == 0:
        raise ValueError("no labels")
    freq = labels.sum(axis=0) / n
    negative = ~labels.any(axis=1)
    # an attribute with frequency 0 never appears in a positive row
    per_attr = np.where(labels, freq[None, :], np.inf)
    rarest = per_attr.min(axis=1)
    rarest[negative] = negative.sum() / n
    w = 1.0 / rarest
    return w / w.sum()


def costsens_weights(labels: np.ndarray) -> np.ndarray:
    """Per-attribute loss weights ``N / (2 * positives_k)``, rescaled to mean 1."""
    labels = np.asarray(labels)
    pos = labels.sum(axis=0).astype(np.float64)
    if np.any(pos == 0):
        raise ValueError(f"attributes {np.flatnonzero(pos == 0).tolist()} have no positives")
    w = len(labels) / (2.0 * pos)
    return w / w.mean()
