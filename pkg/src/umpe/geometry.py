"""Planar rigid motions, polyline resampling and the normalized affine warp.

Every routine that the encoders differentiate through works on torch tensors;
data-preparation callers may pass numpy arrays to ``se2_apply`` and
``resample_polyline`` and get numpy back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from umpe import constants as K

ArrayLike = Union[np.ndarray, torch.Tensor]


class GeometryError(ValueError):
    """Raised on non-finite or malformed geometric input."""


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]; an input of exactly -pi maps to pi."""
    out = math.remainder(theta, 2 * math.pi)
    if out <= -math.pi:
        out += 2 * math.pi
    return out


@dataclass(frozen=True)
class Pose2:
    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0

    def __post_init__(self):
        vals = (self.dx, self.dy, self.dtheta)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite pose {vals}")
        object.__setattr__(self, "dtheta", wrap_angle(float(self.dtheta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor([self.dx, self.dy, self.dtheta], dtype=dtype)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"dx": self.dx, "dy": self.dy, "dtheta": self.dtheta}


@dataclass(frozen=True)
class BEVGridSpec:
    """Canvas geometry. ``mpp_x`` is metres per row (ego x), ``mpp_y`` per column."""

    height: int = K.CANVAS_H
    width: int = K.CANVAS_W
    mpp_x: float = K.X_EXTENT / K.CANVAS_H
    mpp_y: float = K.Y_EXTENT / K.CANVAS_W

    @property
    def num_tokens(self) -> int:
        return self.height * self.width

    def ego_to_pixel(self, pts: np.ndarray) -> np.ndarray:
        """(N, 2) ego metres -> (N, 2) continuous (row, col) pixel coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        row = (self.height * self.mpp_x / 2 - pts[..., 0]) / self.mpp_x - 0.5
        col = (self.width * self.mpp_y / 2 - pts[..., 1]) / self.mpp_y - 0.5
        return np.stack([row, col], axis=-1)

    def pixel_to_ego(self, rc: np.ndarray) -> np.ndarray:
        rc = np.asarray(rc, dtype=np.float64)
        x = self.height * self.mpp_x / 2 - (rc[..., 0] + 0.5) * self.mpp_x
        y = self.width * self.mpp_y / 2 - (rc[..., 1] + 0.5) * self.mpp_y
        return np.stack([x, y], axis=-1)


def _pose_parts(pose):
    if isinstance(pose, Pose2):
        return pose.dx, pose.dy, pose.dtheta
    return pose[..., 0], pose[..., 1], pose[..., 2]


def _check_finite(pts) -> None:
    ok = torch.isfinite(pts).all() if isinstance(pts, torch.Tensor) else np.isfinite(pts).all()
    if not bool(ok):
        raise GeometryError("non-finite coordinates")


def se2_apply(pose, pts: ArrayLike) -> ArrayLike:
    """Rotate by dtheta then translate: p' = R p + T.

    ``pose`` is a :class:`Pose2` or a (..., 3) tensor/array broadcasting
    against the leading dims of ``pts`` (..., N, 2).
    """
    is_torch = isinstance(pts, torch.Tensor)
    if not is_torch:
        pts = np.asarray(pts, dtype=np.float64)
    _check_finite(pts)
    dx, dy, dth = _pose_parts(pose)
    lib = torch if is_torch else np
    if is_torch and not isinstance(dth, torch.Tensor):
        dth = torch.as_tensor(dth, dtype=pts.dtype)
    c, s = lib.cos(dth), lib.sin(dth)
    if not isinstance(pose, Pose2):
        # (..., 3) pose against (..., N, 2) points
        c, s, dx, dy = (v[..., None] for v in (c, s, dx, dy))
    x, y = pts[..., 0], pts[..., 1]
    return lib.stack([c * x - s * y + dx, s * x + c * y + dy], -1)


def se2_invert(pose: Pose2) -> Pose2:
    c, s = math.cos(pose.dtheta), math.sin(pose.dtheta)
    # -R^T T
    return Pose2(-(c * pose.dx + s * pose.dy), -(-s * pose.dx + c * pose.dy), -pose.dtheta)


def se2_compose(a: Pose2, b: Pose2) -> Pose2:
    """Pose of ``x -> a(b(x))``."""
    c, s = math.cos(a.dtheta), math.sin(a.dtheta)
    return Pose2(c * b.dx - s * b.dy + a.dx, s * b.dx + c * b.dy + a.dy, a.dtheta + b.dtheta)


def ego_to_lattice_pose(pose: Pose2) -> Pose2:
    """Express an ego-frame motion in the sampling frame (columns, rows).

    Ego (x, y) maps to lattice (-y, -x) about the canvas centre, which is a
    reflection, so the rotation sense flips. Valid for isotropic pixels.
    """
    return Pose2(-pose.dy, -pose.dx, -pose.dtheta)


@dataclass
class Resampled:
    points: np.ndarray
    degenerate: bool = False


def resample_polyline(pts: np.ndarray, num_points: int = K.POINTS_PER_POLYLINE) -> Resampled:
    """Resample to ``num_points`` equally spaced in arc length, endpoints kept."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 1:
        raise GeometryError(f"expected (N, 2) points, got {pts.shape}")
    if num_points < 2:
        raise GeometryError("num_points must be >= 2")
    _check_finite(pts)
    seg = np.hypot(*np.diff(pts, axis=0).T) if len(pts) > 1 else np.zeros(0)
    total = float(seg.sum())
    if total == 0.0:
        return Resampled(np.repeat(pts[:1], num_points, axis=0), degenerate=True)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, total, num_points)
    # drop zero-length segments so interp sees strictly increasing abscissae
    keep = np.concatenate([[True], seg > 0])
    cum_k, pts_k = cum[keep], pts[keep]
    out = np.stack([np.interp(targets, cum_k, pts_k[:, 0]), np.interp(targets, cum_k, pts_k[:, 1])], -1)
    out[0], out[-1] = pts_k[0], pts_k[-1]
    return Resampled(out)


def affine_theta(pose, grid: BEVGridSpec) -> torch.Tensor:
    """Normalized 2x3 affine for a lattice-frame pose.

    The pose is read in sampling coordinates: dx along columns (width W,
    metres per column ``grid.mpp_y``), dy along rows (height H, metres per
    row ``grid.mpp_x``). Accepts a Pose2 or a (..., 3) tensor; returns
    (..., 2, 3).
    """
    if grid.height < 2 or grid.width < 2:
        raise GeometryError("grid dims must be >= 2")
    if isinstance(pose, Pose2):
        pose = pose.as_tensor()
    dx, dy, dth = pose[..., 0], pose[..., 1], pose[..., 2]
    tx = 2.0 / (grid.width - 1) * (dx / grid.mpp_y)
    ty = 2.0 / (grid.height - 1) * (dy / grid.mpp_x)
    c, s = torch.cos(dth), torch.sin(dth)
    row0 = torch.stack([c, -s, tx], -1)
    row1 = torch.stack([s, c, ty], -1)
    return torch.stack([row0, row1], -2)


def warp_bilinear(fmap: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Sample ``fmap`` at ``theta @ [u, v, 1]`` for every output pixel.

    fmap is (C, H, W) or (B, C, H, W); theta (2, 3) or (B, 2, 3). Zero
    padding, align-corners.
    """
    squeeze = fmap.dim() == 3
    if squeeze:
        fmap = fmap[None]
    if theta.dim() == 2:
        theta = theta[None].expand(fmap.shape[0], 2, 3)
    grid = F.affine_grid(theta.to(fmap.dtype), list(fmap.shape), align_corners=True)
    out = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out[0] if squeeze else out


def flatten_hw(fmap: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C), row-major over (H, W)."""
    b, c, h, w = fmap.shape
    return fmap.reshape(b, c, h * w).transpose(1, 2)


def unflatten_hw(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    b, n, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, height, width)


def clip_segment(p0, p1, xmin: float, xmax: float, ymin: float, ymax: float):
    """Liang-Barsky clip of segment p0->p1; returns (t0, t1) or None."""
    x0, y0 = p0
    ddx, ddy = p1[0] - x0, p1[1] - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-ddx, x0 - xmin), (ddx, xmax - x0), (-ddy, y0 - ymin), (ddy, ymax - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    return t0, t1


def clip_polyline(pts: np.ndarray, xmin: float, xmax: float, ymin: float, ymax: float) -> list[np.ndarray]:
    """Split a polyline into the pieces lying inside the rectangle."""
    pts = np.asarray(pts, dtype=np.float64)
    pieces: list[list] = []
    cur: list = []
    for a, b in zip(pts[:-1], pts[1:]):
        res = clip_segment(a, b, xmin, xmax, ymin, ymax)
        if res is None:
            if cur:
                pieces.append(cur)
                cur = []
            continue
        t0, t1 = res
        start = a + t0 * (b - a)
        end = a + t1 * (b - a)
        # Snap boundary-clipped endpoints exactly onto the rectangle edge.
        if t0 > 0:
            start = _snap(start, xmin, xmax, ymin, ymax)
        if t1 < 1:
            end = _snap(end, xmin, xmax, ymin, ymax)
        if not cur:
            cur = [start]
        elif t0 > 0:
            pieces.append(cur)
            cur = [start]
        cur.append(end)
        if t1 < 1:
            pieces.append(cur)
            cur = []
    if cur:
        pieces.append(cur)
    return [np.asarray(p) for p in pieces if len(p) >= 2]


def _snap(p, xmin, xmax, ymin, ymax):
    x, y = float(p[0]), float(p[1])
    tol = 1e-9
    for edge in (xmin, xmax):
        if abs(x - edge) < tol:
            x = edge
    for edge in (ymin, ymax):
        if abs(y - edge) < tol:
            y = edge
    return np.array([min(max(x, xmin), xmax), min(max(y, ymin), ymax)])
