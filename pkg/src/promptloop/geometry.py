"""Ground-plane box geometry.

Boxes live in a world frame with z up; the simulator and detectors treat the
ground plane as primary, so distances and IoU are computed on bird's-eye-view
footprints. Grid projection maps world boxes into the ego-centered feature
grid used by the scene renderer and the prompt adapter.

Conventions
-----------
* ``Box3D.size`` is (length, width, height); length runs along the yaw axis.
* ``yaw`` is measured in radians, counter-clockwise from world +x, and is
  normalized to [-pi, pi).
* Grid coordinates (u, v) are continuous, u along ego forward (+x of the ego
  frame), v along ego left (+y); cell (iu, iv) spans [iu, iu+1) x [iv, iv+1)
  with its center at (iu + 0.5, iv + 0.5). Arrays are indexed [iv, iu].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

_AREA_EPS = 1e-9  # m^2; footprints below this are treated as degenerate


class DegenerateBoxError(ValueError):
    """Raised when a box footprint is too small to carry geometric meaning."""


def wrap_angle(angle: float) -> float:
    """Normalize an angle to [-pi, pi)."""
    return (angle + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class Pose:
    """Ego pose on the ground plane: position (x, y) and heading (rad)."""

    x: float
    y: float
    heading: float

    def world_to_ego(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 2) world points into this pose's frame."""
        pts = np.asarray(points, dtype=float)
        d = pts - np.array([self.x, self.y])
        c, s = math.cos(self.heading), math.sin(self.heading)
        out = np.empty_like(d)
        out[..., 0] = c * d[..., 0] + s * d[..., 1]
        out[..., 1] = -s * d[..., 0] + c * d[..., 1]
        return out

    def ego_to_world(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        c, s = math.cos(self.heading), math.sin(self.heading)
        out = np.empty_like(pts)
        out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + self.x
        out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + self.y
        return out


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (x, y, z), size (l, w, h), yaw about z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size must be 3-vectors")
        if any(not math.isfinite(v) for v in (*self.center, *self.size, self.yaw)):
            raise ValueError("box fields must be finite")
        if any(s <= 0.0 for s in self.size):
            raise ValueError(f"box size must be positive, got {self.size}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def footprint_area(self) -> float:
        return self.size[0] * self.size[1]

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size),
                "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(center=tuple(d["center"]), size=tuple(d["size"]),
                   yaw=d["yaw"])


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned box in grid coordinates: center (u, v), extent (eu, ev)."""

    center: tuple[float, float]
    extent: tuple[float, float]

    def __post_init__(self):
        if any(not math.isfinite(v) for v in (*self.center, *self.extent)):
            raise ValueError("box fields must be finite")
        if any(e <= 0.0 for e in self.extent):
            raise ValueError(f"extent must be positive, got {self.extent}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))

    @property
    def lo(self) -> tuple[float, float]:
        return (self.center[0] - self.extent[0] / 2, self.center[1] - self.extent[1] / 2)

    @property
    def hi(self) -> tuple[float, float]:
        return (self.center[0] + self.extent[0] / 2, self.center[1] + self.extent[1] / 2)


@dataclass(frozen=True)
class GridSpec:
    """Ego-centered square feature grid: h x w cells covering extent meters."""

    h: int = 64
    w: int = 64
    extent: float = 100.0

    def __post_init__(self):
        if self.h <= 0 or self.w <= 0 or self.extent <= 0:
            raise ValueError("grid dimensions must be positive")

    @property
    def cell_u(self) -> float:
        """Cell size along u, meters."""
        return self.extent / self.w

    @property
    def cell_v(self) -> float:
        return self.extent / self.h

    def world_to_grid(self, points: np.ndarray, ego: Pose) -> np.ndarray:
        """Map (..., 2) world points to continuous grid coordinates."""
        e = ego.world_to_ego(points)
        out = np.empty_like(e)
        out[..., 0] = (e[..., 0] + self.extent / 2) / self.cell_u
        out[..., 1] = (e[..., 1] + self.extent / 2) / self.cell_v
        return out

    def grid_to_world(self, uv: np.ndarray, ego: Pose) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        e = np.empty_like(uv)
        e[..., 0] = uv[..., 0] * self.cell_u - self.extent / 2
        e[..., 1] = uv[..., 1] * self.cell_v - self.extent / 2
        return ego.ego_to_world(e)

    def contains(self, uv) -> bool:
        u, v = float(uv[0]), float(uv[1])
        return 0.0 <= u <= self.w and 0.0 <= v <= self.h


def center_distance(a: Box3D, b: Box3D) -> float:
    """Euclidean distance between box centers on the ground plane."""
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    return math.hypot(dx, dy)


def footprint_corners(box: Box3D) -> np.ndarray:
    """Counter-clockwise (4, 2) world-frame corners of the BEV footprint."""
    l, w = box.size[0], box.size[1]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array(
        [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
    )
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.center[0], box.center[1]])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as (n, 2); positive if CCW."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of convex CCW `subject` against convex CCW `clip`."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        # inside = left of directed edge a->b
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    output.append(
                        (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                    )
                output.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                output.append(
                    (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                )
            prev, prev_side = cur, cur_side
    return np.array(output) if output else np.zeros((0, 2))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Exact IoU of the two rotated BEV footprints.

    Raises DegenerateBoxError if either footprint area is below 1e-9 m^2.
    """
    area_a = a.footprint_area
    area_b = b.footprint_area
    if area_a < _AREA_EPS or area_b < _AREA_EPS:
        raise DegenerateBoxError(f"degenerate footprint: areas {area_a}, {area_b}")
    ca = footprint_corners(a)
    cb = footprint_corners(b)
    # cheap reject: disjoint bounding circles
    r = 0.5 * (math.hypot(*a.size[:2]) + math.hypot(*b.size[:2]))
    if center_distance(a, b) > r:
        return 0.0
    inter = polygon_area(clip_convex(ca, cb))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def footprint_polygon_grid(box: Box3D, ego: Pose, grid: GridSpec) -> np.ndarray:
    """Footprint corners mapped to continuous grid coordinates, (4, 2)."""
    return grid.world_to_grid(footprint_corners(box), ego)


def points_in_convex_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Boolean mask of (n, 2) points inside a convex CCW polygon (inclusive)."""
    pts = np.asarray(points, dtype=float)
    m = len(poly)
    inside = np.ones(len(pts), dtype=bool)
    for i in range(m):
        a = poly[i]
        b = poly[(i + 1) % m]
        ex, ey = b[0] - a[0], b[1] - a[1]
        side = ex * (pts[:, 1] - a[1]) - ey * (pts[:, 0] - a[0])
        inside &= side >= -1e-12
    return inside


def project_to_grid(box: Box3D, ego: Pose, grid: GridSpec) -> Box2D | None:
    """Axis-aligned grid-frame bound of the box footprint, clipped to the grid.

    Returns None when the footprint lies entirely outside the grid (or touches
    it with zero area after clipping).
    """
    poly = footprint_polygon_grid(box, ego, grid)
    lo_u = max(float(poly[:, 0].min()), 0.0)
    hi_u = min(float(poly[:, 0].max()), float(grid.w))
    lo_v = max(float(poly[:, 1].min()), 0.0)
    hi_v = min(float(poly[:, 1].max()), float(grid.h))
    if hi_u - lo_u <= 0.0 or hi_v - lo_v <= 0.0:
        return None
    return Box2D(
        center=((lo_u + hi_u) / 2, (lo_v + hi_v) / 2),
        extent=(hi_u - lo_u, hi_v - lo_v),
    )


def nms(detections, iou_threshold: float):
    """Greedy non-maximum suppression on BEV IoU.

    `detections` is any sequence of objects with `.box` (Box3D) and
    `.confidence` (float). Candidates are visited in order of descending
    confidence (ties: earlier input index first); a candidate is kept iff its
    IoU with every already-kept box is <= iou_threshold (strictly greater
    suppresses). Returns the kept detections in visit order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    kept: list = []
    kept_boxes: list[Box3D] = []
    for i in order:
        box = detections[i].box
        if all(bev_iou(box, kb) <= iou_threshold for kb in kept_boxes):
            kept.append(detections[i])
            kept_boxes.append(box)
    return kept
