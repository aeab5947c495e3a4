"""Top-down heightmap observation of a scene and grasp extraction from it.

The heightmap holds, per grid cell, the top surface height over the table
plane (0 where only the table is visible).  Rendering is analytic: for a
cell center (x, y) the vertical line through it is intersected with each
primitive in its own frame, giving a closed-form z interval (three slab
constraints for a box; an axis slab plus a radial quadratic for a
cylinder), and the cell records the highest interval top across objects.

Surface normals come from central differences of the height field,
n ~ (-dh/dx, -dh/dy, 1) normalized; border cells have no central
difference and are excluded.  Depth discontinuities are detected with an
index-spaced 5-point Laplacian of the normal components: a cell is masked
out when any component's Laplacian magnitude exceeds a threshold.  Pick
grasp candidates are unmasked surface cells of the target object.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np

from .feasibility import GraspPose
from .primitives import PlacedObject
from .rotations import quat_to_matrix

EDGE_THRESHOLD = 0.5


@dataclass
class Heightmap:
    """Height grid with square cells; heights[iy, ix], x along columns."""

    heights: np.ndarray
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if self.heights.ndim != 2:
            raise ValueError("heights must be 2-D")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World x and y coordinates of cell centers, shapes (W,) and (H,)."""
        h, w = self.heights.shape
        xs = self.origin[0] + (np.arange(w) - (w - 1) / 2.0) * self.cell_size
        ys = self.origin[1] + (np.arange(h) - (h - 1) / 2.0) * self.cell_size
        return xs, ys

    def extent(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) covered by the grid."""
        h, w = self.heights.shape
        xs, ys = self.cell_centers()
        half = self.cell_size / 2.0
        return (xs[0] - half, xs[-1] + half, ys[0] - half, ys[-1] + half)

    def points(self) -> np.ndarray:
        """(H, W, 3) world coordinates of the observed surface."""
        xs, ys = self.cell_centers()
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy, self.heights], axis=-1)

    def normals(self) -> tuple[np.ndarray, np.ndarray]:
        """Central-difference surface normals and their validity mask.

        Returns (normals (H, W, 3), valid (H, W)); border cells are
        invalid and hold a zero vector.
        """
        h = self.heights
        H, W = h.shape
        normals = np.zeros((H, W, 3))
        valid = np.zeros((H, W), dtype=bool)
        if H < 3 or W < 3:
            return normals, valid
        dhdx = (h[1:-1, 2:] - h[1:-1, :-2]) / (2.0 * self.cell_size)
        dhdy = (h[2:, 1:-1] - h[:-2, 1:-1]) / (2.0 * self.cell_size)
        inner = np.stack([-dhdx, -dhdy, np.ones_like(dhdx)], axis=-1)
        inner /= np.linalg.norm(inner, axis=-1, keepdims=True)
        normals[1:-1, 1:-1] = inner
        valid[1:-1, 1:-1] = True
        return normals, valid

    def to_base64(self) -> str:
        return base64.b64encode(
            np.ascontiguousarray(self.heights, dtype="<f4").tobytes()
        ).decode("ascii")

    @classmethod
    def from_base64(
        cls, data: str, shape: tuple[int, int], cell_size: float, origin: tuple[float, float]
    ) -> "Heightmap":
        raw = base64.b64decode(data.encode("ascii"))
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        return cls(heights=arr, cell_size=cell_size, origin=tuple(origin))


@dataclass
class PointNormalCloud:
    """Flattened surface samples: one point-normal pair per surviving cell."""

    points: np.ndarray
    normals: np.ndarray
    source_cell: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.source_cell = np.asarray(self.source_cell, dtype=np.int64).reshape(-1, 2)
        if not (self.points.shape[0] == self.normals.shape[0] == self.source_cell.shape[0]):
            raise ValueError("points, normals and source_cell must have equal lengths")

    def __len__(self) -> int:
        return self.points.shape[0]


def laplacian_edge_mask(normals: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Cells adjacent to depth discontinuities, from the normal field.

    Applies the 5-point Laplacian in index space (no cell-size scaling) to
    each normal component; a cell is flagged when any component magnitude
    exceeds the threshold.  Border cells are always flagged since the
    stencil does not fit.
    """
    normals = np.asarray(normals, dtype=np.float64)
    H, W = normals.shape[:2]
    mask = np.ones((H, W), dtype=bool)
    if H < 3 or W < 3:
        return mask
    lap = (
        normals[2:, 1:-1]
        + normals[:-2, 1:-1]
        + normals[1:-1, 2:]
        + normals[1:-1, :-2]
        - 4.0 * normals[1:-1, 1:-1]
    )
    mask[1:-1, 1:-1] = np.any(np.abs(lap) > threshold, axis=-1)
    return mask


def _column_interval_tops(obj: PlacedObject, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Top z of the object along vertical lines through the cell centers.

    gx, gy: (H, W) world coordinates; returns (H, W) with -inf where the
    line misses the object.
    """
    rot = quat_to_matrix(obj.quaternion)
    inv = rot.T
    base = np.stack([gx - obj.position[0], gy - obj.position[1], -np.full_like(gx, obj.position[2])], axis=-1)
    o = base @ inv.T
    d = inv[:, 2]
    lo = np.full(gx.shape, -np.inf)
    hi = np.full(gx.shape, np.inf)

    def slab(oc, dc, half):
        """Intersect lo/hi with |oc + z*dc| <= half."""
        nonlocal lo, hi
        if abs(dc) < 1e-12:
            miss = np.abs(oc) > half
            lo = np.where(miss, np.inf, lo)
            hi = np.where(miss, -np.inf, hi)
        else:
            t1 = (-half - oc) / dc
            t2 = (half - oc) / dc
            lo = np.maximum(lo, np.minimum(t1, t2))
            hi = np.minimum(hi, np.maximum(t1, t2))

    if obj.spec.kind == "box":
        hx, hy, hz = obj.spec.dims
        for axis, half in enumerate((hx, hy, hz)):
            slab(o[..., axis], d[axis], half)
    else:
        r, hh = obj.spec.dims
        slab(o[..., 2], d[2], hh)
        # radial constraint: |(o + z d) x,y|^2 <= r^2, quadratic in z
        a = d[0] * d[0] + d[1] * d[1]
        b = 2.0 * (o[..., 0] * d[0] + o[..., 1] * d[1])
        c = o[..., 0] ** 2 + o[..., 1] ** 2 - r * r
        if a < 1e-12:
            miss = c > 0
            lo = np.where(miss, np.inf, lo)
            hi = np.where(miss, -np.inf, hi)
        else:
            disc = b * b - 4.0 * a * c
            miss = disc < 0
            sq = np.sqrt(np.maximum(disc, 0.0))
            t1 = (-b - sq) / (2.0 * a)
            t2 = (-b + sq) / (2.0 * a)
            lo = np.where(miss, np.inf, np.maximum(lo, t1))
            hi = np.where(miss, -np.inf, np.minimum(hi, t2))

    top = np.where(hi >= lo, hi, -np.inf)
    return top


def render_heightmap(
    objects: list[PlacedObject],
    grid_size: int,
    cell_size: float,
    origin: tuple[float, float] = (0.0, 0.0),
) -> tuple[Heightmap, np.ndarray]:
    """Render objects over the table plane.

    Returns (heightmap, owner) where owner[iy, ix] is the index of the
    object forming the visible surface at that cell, or -1 for the table.
    """
    xs = origin[0] + (np.arange(grid_size) - (grid_size - 1) / 2.0) * cell_size
    ys = origin[1] + (np.arange(grid_size) - (grid_size - 1) / 2.0) * cell_size
    gx, gy = np.meshgrid(xs, ys)
    heights = np.zeros((grid_size, grid_size))
    owner = np.full((grid_size, grid_size), -1, dtype=np.int32)
    for idx, obj in enumerate(objects):
        top = _column_interval_tops(obj, gx, gy)
        better = top > heights
        heights = np.where(better, top, heights)
        owner = np.where(better, idx, owner)
    return Heightmap(heights=heights, cell_size=cell_size, origin=origin), owner


def downsample_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Block-average a 2-D array by an integer factor."""
    H, W = arr.shape
    if H % factor or W % factor:
        raise ValueError("array shape must be divisible by factor")
    return arr.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3))


def upsample_nearest(arr: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsample of a 2-D array by an integer factor."""
    return np.kron(arr, np.ones((factor, factor), dtype=arr.dtype))


def heightmap_to_pointnormals(
    hm: Heightmap,
    mask: np.ndarray | None = None,
    edge_threshold: float = EDGE_THRESHOLD,
) -> PointNormalCloud:
    """Surface samples for the (optionally masked) heightmap.

    Keeps one point-normal pair per interior cell that lies in the mask
    and survives the Laplacian edge mask; border cells are excluded
    because they have no central-difference normal.
    """
    normals, valid = hm.normals()
    edges = laplacian_edge_mask(normals, edge_threshold)
    eligible = valid & ~edges
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != hm.shape:
            raise ValueError(f"mask shape {m.shape} does not match grid {hm.shape}")
        eligible &= m
    iy, ix = np.nonzero(eligible)
    pts = hm.points()
    return PointNormalCloud(
        points=pts[iy, ix],
        normals=normals[iy, ix],
        source_cell=np.stack([iy, ix], axis=1) if iy.size else np.zeros((0, 2)),
    )


def sample_pick_grasps(
    hm: Heightmap,
    target_mask: np.ndarray,
    n: int,
    rng: np.random.Generator,
    edge_threshold: float = EDGE_THRESHOLD,
    min_height: float = 0.005,
) -> list[GraspPose]:
    """Draw grasp candidates on the target's visible surface.

    Eligible cells lie in target_mask, have a valid central-difference
    normal, clear the minimum height, and survive the Laplacian edge mask.
    Up to n cells are drawn without replacement; the grasp point is the
    surface point and the normal the local surface normal.
    """
    mask = np.asarray(target_mask, dtype=bool) & (hm.heights > min_height)
    cloud = heightmap_to_pointnormals(hm, mask, edge_threshold)
    if len(cloud) == 0:
        return []
    count = min(n, len(cloud))
    chosen = rng.choice(len(cloud), size=count, replace=False)
    return [GraspPose(cloud.points[c], cloud.normals[c]) for c in chosen]
