"""Bilinear (general-form) alignment attention over a set of region features.

Scores every region feature against the current decoder hidden state with a
learned bilinear form, normalises the scores into alignment weights, and
returns the weight-averaged context vector together with the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ContractError, ShapeError, Tensor


@dataclass
class AnnotationSet:
    """K region feature vectors of dimension D, one per image region."""

    annotations: Tensor  # K x D

    def __post_init__(self):
        if self.annotations.data.ndim != 2:
            raise ShapeError("annotations must be a K x D matrix")
        # Tensor construction already rejects empty/non-finite data

    @property
    def k(self) -> int:
        return self.annotations.data.shape[0]

    @property
    def d(self) -> int:
        return self.annotations.data.shape[1]


@dataclass
class AttentionParams:
    """Bilinear score matrix mapping region features into hidden space."""

    w_a: Tensor  # H x D


def align_score(a_k: Tensor, h: Tensor, params: AttentionParams) -> Tensor:
    """Bilinear alignment score of one region feature against the hidden state."""
    hd, wd, ad = h.data, params.w_a.data, a_k.data
    if hd.ndim != 1 or ad.ndim != 1 or wd.shape != (hd.shape[0], ad.shape[0]):
        raise ShapeError(
            f"align_score: h {hd.shape}, w_a {wd.shape}, a_k {ad.shape} inconsistent")
    return nm.sum_all(nm.hadamard(h, nm.matmul(params.w_a, a_k)))


def attend(annotations: AnnotationSet, h: Tensor, params: AttentionParams):
    """Score all regions against ``h`` and average them by the soft weights.

    Returns (context, alpha): the alignment-weighted sum of region features
    (a vector of dimension D) and the weights themselves (a simplex point of
    dimension K). Differentiable w.r.t. h, the score matrix, and the regions.
    """
    a = annotations.annotations
    if a.data.shape[0] < 1:
        raise ContractError("attend needs at least one region")
    if h.data.ndim != 1 or params.w_a.data.shape != (h.data.shape[0], a.data.shape[1]):
        raise ShapeError(
            f"attend: h {h.data.shape}, w_a {params.w_a.data.shape}, "
            f"annotations {a.data.shape} inconsistent")
    scores = nm.matmul(a, nm.matmul(nm.transpose(params.w_a), h))
    alpha = nm.softmax(scores)
    context = nm.matmul(nm.transpose(a), alpha)
    return context, alpha
