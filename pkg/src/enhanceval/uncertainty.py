"""Probability-map analytics: entropy maps and case-level uncertainty summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .errors import DegenerateInputError, ValidationError
from .volume_io import LabelGrid, ProbGrid, VoxelGrid, require_alignment

LN4 = float(np.log(4.0))
HIGH_ENTROPY_THRESHOLD = 0.5


def entropy_map(prob: ProbGrid) -> VoxelGrid:
    """Per-voxel normalized entropy H = -sum(p ln p) / ln 4, range [0, 1].

    One-hot voxels score 0, the uniform distribution scores 1.
    """
    p = prob.data.astype(np.float64)
    h = -xlogy(p, p).sum(axis=-1) / LN4
    return VoxelGrid(prob.dims, prob.spacing, prob.affine.copy(), np.clip(h, 0.0, 1.0))


@dataclass
class UncertaintySummary:
    mean_enh_prob: float
    max_enh_prob: float
    mean_entropy: float
    boundary_fraction: float
    high_uncertainty: bool
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean_enh_prob": self.mean_enh_prob,
            "max_enh_prob": self.max_enh_prob,
            "mean_entropy": self.mean_entropy,
            "boundary_fraction": self.boundary_fraction,
            "high_uncertainty": self.high_uncertainty,
            "flags": self.flags,
        }

    CSV_FIELDS = (
        "case_id",
        "mean_enh_prob",
        "max_enh_prob",
        "mean_entropy",
        "boundary_fraction",
        "high_uncertainty",
        "flags",
    )


def summarize_case(
    prob: ProbGrid, pred: LabelGrid, intracranial: np.ndarray
) -> UncertaintySummary:
    """Case-level uncertainty summary over the intracranial mask.

    * ``mean_entropy``: mean normalized entropy over intracranial voxels;
      the case is flagged high-uncertainty when it exceeds 0.5.
    * ``boundary_fraction``: fraction of intracranial voxels whose entropy
      exceeds 0.5 (strictly).
    * ``mean_enh_prob``: mean enhancing-channel probability over voxels the
      prediction labels enhancing (0 with a flag when there are none).
    * ``max_enh_prob``: maximal enhancing-channel probability over the
      intracranial mask; this is the case score used for ROC analysis.
    """
    require_alignment(prob, pred, "probability map and prediction")
    mask = np.asarray(intracranial, dtype=bool)
    if mask.shape != prob.dims:
        raise ValidationError(
            f"intracranial mask shape {mask.shape} does not match dims {prob.dims}"
        )
    if not mask.any():
        raise DegenerateInputError("intracranial mask is empty")

    entropy = entropy_map(prob).data[mask].astype(np.float64)
    mean_entropy = float(entropy.mean())
    boundary_fraction = float(
        np.count_nonzero(entropy > HIGH_ENTROPY_THRESHOLD) / entropy.size
    )
    enh_channel = prob.data[..., 3].astype(np.float64)
    max_enh_prob = float(enh_channel[mask].max())

    flags: list[str] = []
    pred_enh = pred.data == 3
    if pred_enh.any():
        mean_enh_prob = float(enh_channel[pred_enh].mean())
    else:
        mean_enh_prob = 0.0
        flags.append("no-predicted-enhancement")

    return UncertaintySummary(
        mean_enh_prob=mean_enh_prob,
        max_enh_prob=max_enh_prob,
        mean_entropy=mean_entropy,
        boundary_fraction=boundary_fraction,
        high_uncertainty=mean_entropy > HIGH_ENTROPY_THRESHOLD,
        flags=flags,
    )
