"""Structural check of generated images against the scaffold.

Depth edges of the scaffold render are compared with depth edges of a
monocular estimate of the generated image. Only scaffold edges missing from
the estimate count against it: recall is the fraction of scaffold edge pixels
within ``delta`` pixels (L-infinity) of some estimated edge pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.feature import canny

from worldmesh.errors import AdapterFailure, DimensionMismatch

CANNY_SIGMA = 1.4
CANNY_LOW = 0.05
CANNY_HIGH = 0.15
EDGE_DELTA = 10
RECALL_THRESHOLD = 0.6
# ndimage.sobel weighs the central difference by 1-2-1 smoothing: a unit ramp reads as 8
_SOBEL_GAIN = 8.0


@dataclass(frozen=True, eq=False)
class EdgeMap:
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("edge map must be 2-D")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def __or__(self, other: "EdgeMap") -> "EdgeMap":
        return EdgeMap(self.mask | other.mask)


@dataclass(frozen=True)
class VerificationResult:
    recall: float
    threshold: float
    delta: int
    mesh_edge_pixels: int
    matched_pixels: int

    @property
    def passed(self) -> bool:
        return self.recall > self.threshold

    def to_dict(self) -> dict:
        return {"recall": self.recall, "threshold": self.threshold, "delta": self.delta, "pass": self.passed,
                "mesh_edge_pixels": self.mesh_edge_pixels, "matched_pixels": self.matched_pixels}


def normalize_depth(depth) -> np.ndarray:
    """Depth rescaled to [0, 1] over its valid range; no-hit pixels sit at the far end (1)."""
    d = np.asarray(getattr(depth, "values", depth), dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    out = np.ones(d.shape)
    if not valid.any():
        return out
    lo, hi = d[valid].min(), d[valid].max()
    out[valid] = (d[valid] - lo) / (hi - lo) if hi > lo else 0.0
    return out


def depth_edges(depth, low: float = CANNY_LOW, high: float = CANNY_HIGH, sigma: float = CANNY_SIGMA) -> EdgeMap:
    """Canny edges of the normalized depth; thresholds are per-pixel gradient magnitudes."""
    img = normalize_depth(depth)
    if img.min() == img.max():
        return EdgeMap(np.zeros(img.shape, dtype=bool))
    return EdgeMap(canny(img, sigma=sigma, low_threshold=low * _SOBEL_GAIN, high_threshold=high * _SOBEL_GAIN,
                         mode="nearest"))


def dilate(edges: EdgeMap, delta: int) -> EdgeMap:
    """Dilation by a (2*delta+1)^2 square; pixels outside the image count as empty."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0:
        return edges
    return EdgeMap(ndimage.maximum_filter(edges.mask, size=2 * delta + 1, mode="constant", cval=False))


def _counts(mesh_edges: EdgeMap, est_edges: EdgeMap, delta: int) -> tuple[int, int]:
    if mesh_edges.mask.shape != est_edges.mask.shape:
        raise DimensionMismatch(f"edge maps {mesh_edges.mask.shape} vs {est_edges.mask.shape}")
    total = mesh_edges.count
    matched = int((mesh_edges.mask & dilate(est_edges, delta).mask).sum())
    return total, matched


def edge_recall(mesh_edges: EdgeMap, est_edges: EdgeMap, delta: int = EDGE_DELTA) -> float:
    """|E_mesh & dilate(E_est, delta)| / |E_mesh|; 1.0 when the scaffold has no edges."""
    total, matched = _counts(mesh_edges, est_edges, delta)
    return 1.0 if total == 0 else matched / total


def estimate_depth(adapter, image: np.ndarray) -> np.ndarray:
    """Call the depth adapter and check its output against the image size."""
    try:
        est = adapter.estimate_depth(image)
    except AdapterFailure:
        raise
    except Exception as exc:  # adapters wrap arbitrary tools
        raise AdapterFailure(f"depth estimation failed: {exc}") from exc
    est = np.asarray(getattr(est, "values", est), dtype=np.float64)
    if est.shape != image.shape[:2]:
        raise AdapterFailure(f"depth adapter returned {est.shape}, expected {image.shape[:2]}")
    return est


def verify_image(generated: np.ndarray, scaffold_depth, depth_adapter, threshold: float = RECALL_THRESHOLD,
                 delta: int = EDGE_DELTA, low: float = CANNY_LOW, high: float = CANNY_HIGH) -> VerificationResult:
    """Recall of scaffold depth edges against edges of the generated image's estimated depth."""
    mesh_edges = depth_edges(scaffold_depth, low, high)
    est_edges = depth_edges(estimate_depth(depth_adapter, generated), low, high)
    total, matched = _counts(mesh_edges, est_edges, delta)
    recall = 1.0 if total == 0 else matched / total
    return VerificationResult(recall, threshold, delta, total, matched)
