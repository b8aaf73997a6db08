"""Segmentation quality and sequential-transfer metrics.

The accuracy matrix R holds one row per training round: R[i][j] is the score
on site j's test split after finishing round i.  Retention (bwt), anticipation
(fwt) and distance degradation (bwt_plus) are plain triangle statistics of R.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutError, MetricUndefinedError, ValidationError
from .tensor_core import Tensor


def _as_binary(a: Tensor, name: str) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isin(a, (0.0, 1.0))):
        raise ValidationError(f"{name} must be exactly binary")
    return a


def dsc(pred: Tensor, truth: Tensor) -> float:
    """Overlap score 2|A n B| / (|A| + |B|); two empty masks score 1.0."""
    pred = _as_binary(pred, "pred")
    truth = _as_binary(truth, "truth")
    if pred.shape != truth.shape:
        raise LayoutError(f"shape mismatch {pred.shape} vs {truth.shape}")
    total = pred.sum() + truth.sum()
    if total == 0:
        return 1.0
    return float(2.0 * (pred * truth).sum() / total)


def boundary_pixels(mask: Tensor) -> np.ndarray:
    """Coordinates of foreground pixels with a background 4-neighbor.

    Pixels outside the image count as background, so foreground touching the
    border is part of the boundary.
    """
    mask = _as_binary(mask, "mask")
    padded = np.pad(mask, 1, mode="constant")
    core = padded[1:-1, 1:-1]
    has_bg_neighbor = (
        (padded[:-2, 1:-1] == 0)
        | (padded[2:, 1:-1] == 0)
        | (padded[1:-1, :-2] == 0)
        | (padded[1:-1, 2:] == 0)
    )
    return np.argwhere((core == 1) & has_bg_neighbor)


def asd(pred: Tensor, truth: Tensor, spacing: float = 1.0) -> float:
    """Symmetric average surface distance between two non-empty masks.

    Mean over boundary(pred) of the nearest distance to boundary(truth),
    averaged with the reverse direction; distances are Euclidean in pixel
    units scaled by ``spacing``.  Exhaustive nearest-boundary search -- this
    brute-force definition doubles as the oracle for any faster variant.
    """
    pred = _as_binary(pred, "pred")
    truth = _as_binary(truth, "truth")
    if pred.shape != truth.shape:
        raise LayoutError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.sum() == 0 or truth.sum() == 0:
        raise MetricUndefinedError("surface distance is undefined for an empty mask")
    bp = boundary_pixels(pred).astype(np.float64)
    bt = boundary_pixels(truth).astype(np.float64)
    d2 = ((bp[:, None, :] - bt[None, :, :]) ** 2).sum(axis=2)
    d = np.sqrt(d2) * float(spacing)
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


@dataclass
class AccuracyMatrix:
    """n x n train-round by test-site score matrix."""

    site_ids: list[int]
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.site_ids)
        if self.values is None:
            self.values = np.full((n, n), np.nan)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (n, n):
            raise ValidationError(f"matrix must be {n}x{n}, got {self.values.shape}")

    @property
    def n(self) -> int:
        return len(self.site_ids)

    def set_row(self, i: int, row) -> None:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.n,):
            raise ValidationError(f"row must have {self.n} entries")
        self.values[i] = row

    def is_complete(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def _matrix_values(r) -> np.ndarray:
    values = r.values if isinstance(r, AccuracyMatrix) else np.asarray(r, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValidationError(f"accuracy matrix must be square, got {values.shape}")
    if values.shape[0] < 2:
        raise ValidationError("transfer metrics need at least 2 sites")
    return values


def bwt(r) -> float:
    """Mean clipped retention over the strict lower triangle.

    Each past-site term contributes 1 minus its forgetting magnitude
    |min(R[i,j] - R[j,j], 0)|; improvements on past sites do not deduct.
    Equals 1.0 exactly when no score fell below its diagonal reference.
    """
    values = _matrix_values(r)
    n = values.shape[0]
    total = 0.0
    for i in range(1, n):
        for j in range(i):
            total += 1.0 - abs(min(values[i, j] - values[j, j], 0.0))
    return float(2.0 * total / (n * (n - 1)))


def fwt(r) -> float:
    """Mean score over the strict upper triangle (sites not yet trained)."""
    values = _matrix_values(r)
    n = values.shape[0]
    upper = values[np.triu_indices(n, k=1)]
    return float(upper.mean())


def bwt_plus(r) -> float:
    """Mean positive degradation over the lower triangle of a distance matrix.

    For lower-is-better scores, only increases past the diagonal reference
    count; zero means no degradation anywhere.
    """
    values = _matrix_values(r)
    n = values.shape[0]
    total = 0.0
    for i in range(1, n):
        for j in range(i):
            total += max(values[i, j] - values[j, j], 0.0)
    return float(2.0 * total / (n * (n - 1)))


# ---------------------------------------------------------------------------
# Serialization: CSV matrix with a site-id header plus a JSON summary.


def save_matrix_csv(matrix: AccuracyMatrix, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round"] + [f"site_{sid}" for sid in matrix.site_ids])
        for i, row in enumerate(matrix.values):
            writer.writerow([i + 1] + [repr(float(v)) for v in row])


def load_matrix_csv(path: str) -> AccuracyMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0][1:]
    site_ids = [int(h.removeprefix("site_")) for h in header]
    values = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return AccuracyMatrix(site_ids, values)


def matrix_summary(matrix_dsc: AccuracyMatrix, matrix_asd: AccuracyMatrix) -> dict:
    """Transfer statistics of a completed run, JSON-serializable."""
    return {
        "bwt": bwt(matrix_dsc),
        "fwt": fwt(matrix_dsc),
        "bwt_plus": bwt_plus(matrix_asd),
        "fwt_asd": fwt(matrix_asd),
    }


def save_summary_json(summary: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
