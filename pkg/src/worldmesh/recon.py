"""Point-cloud initialization from scaffold depth and the reconstruction loss.

Scaffold depth maps are lifted back to world points (optionally colored by
the generated image) to seed a splat reconstruction. The loss combines a
photometric L1, a structural term (1 - SSIM) and a depth L1 against scaffold
depth that keeps the reconstruction from drifting off the geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from worldmesh.cameras import Camera
from worldmesh.errors import DimensionMismatch, NoValidDepthPixels
from worldmesh.render import discontinuity_mask

LAMBDA_SSIM = 0.2
LAMBDA_DEPTH = 0.7
BACKPROJECT_STRIDE = 4
VOXEL_SIZE = 0.02
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    colors: np.ndarray  # (N, 3) in [0, 1]
    source: np.ndarray  # (N,) camera id per point

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        c = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
        s = np.array(self.source, dtype=object).reshape(-1)
        if not (len(p) == len(c) == len(s)):
            raise ValueError("points, colors and sources differ in length")
        if not np.isfinite(p).all():
            raise ValueError("point coordinates must be finite")
        if len(c) and (c.min() < 0 or c.max() > 1):
            raise ValueError("colors must lie in [0, 1]")
        for a in (p, c, s):
            a.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "colors", c)
        object.__setattr__(self, "source", s)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=object))


def _depth_values(depth) -> np.ndarray:
    return np.asarray(getattr(depth, "values", depth), dtype=np.float64)


def backproject(depth, cam: Camera, color: np.ndarray | None = None, stride: int = BACKPROJECT_STRIDE,
                exclude_bands: bool = False) -> PointCloud:
    """World points for hit pixels on the stride grid (pixel centers), colored from ``color`` if given."""
    d = _depth_values(depth)
    if d.shape != (cam.height, cam.width):
        raise DimensionMismatch(f"depth {d.shape} vs camera {(cam.height, cam.width)}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    keep = np.zeros(d.shape, dtype=bool)
    keep[::stride, ::stride] = True
    keep &= np.isfinite(d) & (d > 0)
    if exclude_bands:
        keep &= ~discontinuity_mask(d)
    rows, cols = np.nonzero(keep)
    pts = cam.unproject(cols + 0.5, rows + 0.5, d[rows, cols])
    if color is not None:
        img = np.asarray(color)
        if img.shape[:2] != d.shape:
            raise DimensionMismatch(f"color {img.shape[:2]} vs depth {d.shape}")
        rgb = img[rows, cols, :3].astype(np.float64)
        rgb = rgb / 255.0 if np.issubdtype(img.dtype, np.integer) else np.clip(rgb, 0.0, 1.0)
    else:
        rgb = np.full((len(rows), 3), 0.5)
    return PointCloud(pts, rgb, np.full(len(rows), cam.id, dtype=object))


def merge_clouds(clouds, voxel: float = VOXEL_SIZE) -> PointCloud:
    """Concatenate and keep one point per voxel.

    Points are first sorted canonically (voxel, then coordinates, colors and
    source) so the first point of each voxel, and therefore the output, does
    not depend on the order of the input clouds.
    """
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        return PointCloud.empty()
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    pts = np.concatenate([c.points for c in clouds])
    cols = np.concatenate([c.colors for c in clouds])
    src = np.concatenate([c.source for c in clouds])
    keys = np.floor(pts / voxel).astype(np.int64)
    src_rank = np.unique(src.astype(str), return_inverse=True)[1]
    order = np.lexsort((src_rank, *cols.T[::-1], *pts.T[::-1], *keys.T[::-1]))
    keys = keys[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    sel = order[first]
    return PointCloud(pts[sel], cols[sel], src[sel])


def write_ply(cloud: PointCloud, path) -> None:
    """Binary little-endian PLY with float32 xyz and uint8 rgb."""
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(cloud)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n").encode("ascii")
    rec = np.zeros(len(cloud), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec["xyz"] = cloud.points
    rec["rgb"] = np.round(cloud.colors * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """(xyz float32, rgb uint8) from a file written by ``write_ply``."""
    data = open(path, "rb").read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    n = next(int(line.split()[-1]) for line in data[:end].decode("ascii").splitlines()
             if line.startswith("element vertex"))
    rec = np.frombuffer(data[end:], dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)], count=n)
    return rec["xyz"].copy(), rec["rgb"].copy()


# -- loss ------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    dssim: float
    depth_l1: float
    lambda_ssim: float = LAMBDA_SSIM
    lambda_depth: float = LAMBDA_DEPTH

    @property
    def total(self) -> float:
        return (1.0 - self.lambda_ssim) * self.l1 + self.lambda_ssim * self.dssim + self.lambda_depth * self.depth_l1

    def to_dict(self) -> dict:
        return {"l1": self.l1, "dssim": self.dssim, "depth_l1": self.depth_l1, "total": self.total,
                "weights": {"lambda_ssim": self.lambda_ssim, "lambda_depth": self.lambda_depth}}


def _as_unit(img) -> np.ndarray:
    a = np.asarray(img)
    out = a.astype(np.float64)
    if np.issubdtype(a.dtype, np.integer):
        out /= 255.0
    return out if out.ndim == 3 else out[..., None]


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _local_mean(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Weighted mean over every full window position (no padding), one axis at a time."""
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(a, b, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, data_range: float = 1.0) -> float:
    """Mean SSIM over full Gaussian windows, averaged over channels; images in [0, 1] (or uint8)."""
    x, y = _as_unit(a), _as_unit(b)
    if x.shape != y.shape:
        raise DimensionMismatch(f"images {x.shape} vs {y.shape}")
    if x.shape[0] < size or x.shape[1] < size:
        raise ValueError(f"images must be at least {size}x{size}")
    w = gaussian_kernel(size, sigma)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(x.shape[2]):
        p, q = x[..., ch], y[..., ch]
        mp, mq = _local_mean(p, w), _local_mean(q, w)
        vp = _local_mean(p * p, w) - mp * mp
        vq = _local_mean(q * q, w) - mq * mq
        cov = _local_mean(p * q, w) - mp * mq
        s = ((2 * mp * mq + c1) * (2 * cov + c2)) / ((mp * mp + mq * mq + c1) * (vp + vq + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def dssim(a, b) -> float:
    return 1.0 - ssim(a, b)


def loss_eval(rendered, target, rendered_depth, target_depth, lambda_ssim: float = LAMBDA_SSIM,
              lambda_depth: float = LAMBDA_DEPTH) -> LossBreakdown:
    """Photometric L1, DSSIM and depth L1 (over pixels valid in both maps) with their weights."""
    x, y = _as_unit(rendered), _as_unit(target)
    if x.shape != y.shape:
        raise DimensionMismatch(f"images {x.shape} vs {y.shape}")
    dr, dt = _depth_values(rendered_depth), _depth_values(target_depth)
    if dr.shape != dt.shape or dr.shape != x.shape[:2]:
        raise DimensionMismatch(f"depths {dr.shape} / {dt.shape} vs image {x.shape[:2]}")
    valid = np.isfinite(dr) & np.isfinite(dt) & (dr > 0) & (dt > 0)
    if not valid.any():
        raise NoValidDepthPixels("no pixel has depth in both maps")
    l1 = float(np.abs(x - y).mean())
    return LossBreakdown(l1, dssim(x, y), float(np.abs(dr[valid] - dt[valid]).mean()),
                         lambda_ssim, lambda_depth)
