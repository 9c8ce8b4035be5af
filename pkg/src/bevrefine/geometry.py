"""Camera models, the BEV grid, pillar reference points, and projection tables.

Conventions: the ego frame is x-forward / y-left / z-up with the origin at the
vehicle center on the ground; camera frames are the usual computer-vision
z-forward / x-right / y-down. A projected point is valid iff its camera-frame
depth exceeds DEPTH_EPS and (u, v) lands inside the image rectangle.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

DEPTH_EPS = 1e-6

# far-outside normalized coordinate substituted for invalid projections when
# attention consumes the table; samples there read as zero
INVALID_SENTINEL = -1.0e4


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics, ego-to-camera extrinsics, image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3), ego frame -> camera frame
    translation: np.ndarray  # (3,), meters
    height: int
    width: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise GeometryError("camera rotation is not orthonormal (tol 1e-9)")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("camera rotation determinant is not +1 (tol 1e-9)")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")
        r = r.copy()
        t = t.copy()
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def center(self) -> np.ndarray:
        """Camera center in the ego frame."""
        return -self.rotation.T @ self.translation


def project_to_image(cam: CameraModel, point) -> tuple[float, float, bool]:
    """Project one ego-frame 3D point; returns (u, v, valid)."""
    p = cam.rotation @ np.asarray(point, dtype=np.float64) + cam.translation
    z = p[2]
    if z <= DEPTH_EPS:
        return 0.0, 0.0, False
    u = cam.fx * p[0] / z + cam.cx
    v = cam.fy * p[1] / z + cam.cy
    valid = (0.0 <= u < cam.width) and (0.0 <= v < cam.height)
    return float(u), float(v), valid


def project_points(cam: CameraModel, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) ego-frame points -> (u, v, valid)."""
    p = np.asarray(pts, dtype=np.float64) @ cam.rotation.T + cam.translation
    z = p[:, 2]
    front = z > DEPTH_EPS
    zsafe = np.where(front, z, 1.0)
    u = np.where(front, cam.fx * p[:, 0] / zsafe + cam.cx, 0.0)
    v = np.where(front, cam.fy * p[:, 1] / zsafe + cam.cy, 0.0)
    valid = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, valid


@dataclass(frozen=True)
class BEVGridSpec:
    """Target-resolution BEV grid over a metric extent centered on the ego pose."""

    x_cells: int
    y_cells: int
    length_m: float
    width_m: float
    channels: int
    z_anchors: tuple[float, ...] = (-1.0, 0.0, 1.0, 2.0)

    def __post_init__(self):
        za = tuple(float(z) for z in self.z_anchors)
        if any(b <= a for a, b in zip(za, za[1:])):
            raise GeometryError("z-anchors must be strictly increasing")
        object.__setattr__(self, "z_anchors", za)

    @property
    def num_z(self) -> int:
        return len(self.z_anchors)

    def level_shape(self, level: int) -> tuple[int, int]:
        """(rows, cols) of pyramid level `level` (1 = target resolution)."""
        f = 2 ** (level - 1)
        if self.x_cells % f or self.y_cells % f:
            raise GeometryError(
                f"grid {self.x_cells}x{self.y_cells} not divisible for level {level}"
            )
        return self.x_cells // f, self.y_cells // f

    def cell_centers(self, level: int) -> np.ndarray:
        """(rows*cols, 2) metric (x, y) centers of level-`level` cells, row-major."""
        rows, cols = self.level_shape(level)
        dx = self.length_m / rows
        dy = self.width_m / cols
        xs = -self.length_m / 2 + (np.arange(rows) + 0.5) * dx
        ys = -self.width_m / 2 + (np.arange(cols) + 0.5) * dy
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


def bev_cell_to_world(cell: tuple[int, int], spec: BEVGridSpec, level: int = 1) -> np.ndarray:
    """Pillar of Z ego-frame 3D points above the metric center of a BEV cell."""
    rows, cols = spec.level_shape(level)
    r, c = cell
    if not (0 <= r < rows and 0 <= c < cols):
        raise GeometryError(f"cell {cell} outside level-{level} grid {rows}x{cols}")
    x = -spec.length_m / 2 + (r + 0.5) * spec.length_m / rows
    y = -spec.width_m / 2 + (c + 0.5) * spec.width_m / cols
    return np.array([[x, y, z] for z in spec.z_anchors], dtype=np.float64)


def compute_hit_set(
    cell: tuple[int, int],
    cameras: list[CameraModel],
    spec: BEVGridSpec,
    level: int = 1,
) -> frozenset[int]:
    """Indices of cameras seeing at least one of the cell's pillar points."""
    if not cameras:
        raise GeometryError("at least one camera required")
    pillar = bev_cell_to_world(cell, spec, level)
    hit = set()
    for i, cam in enumerate(cameras):
        _, _, valid = project_points(cam, pillar)
        if valid.any():
            hit.add(i)
    return frozenset(hit)


class ProjectionTable:
    """Precomputed (level, cell, camera, z) -> (u, v, valid) projections.

    `uv[level]` holds pixel coordinates of shape (cells, n_cams, Z, 2) and
    `valid[level]` the matching bool array; invalid entries keep the raw
    project_to_image output (0, 0, False). `normalized` applies (u/W, v/H)
    and replaces invalid entries with a far-outside sentinel so deformable
    sampling reads them as zero.
    """

    def __init__(self, spec: BEVGridSpec, cameras: list[CameraModel], levels: int):
        if not cameras:
            raise GeometryError("at least one camera required")
        self.spec = spec
        self.cameras = list(cameras)
        self.levels = int(levels)
        self.uv: dict[int, np.ndarray] = {}
        self.valid: dict[int, np.ndarray] = {}
        zs = np.asarray(spec.z_anchors)
        for level in range(1, self.levels + 1):
            centers = spec.cell_centers(level)
            n = centers.shape[0]
            pts = np.concatenate(
                [
                    np.broadcast_to(centers[:, None, :], (n, len(zs), 2)),
                    np.broadcast_to(zs[None, :, None], (n, len(zs), 1)),
                ],
                axis=2,
            ).reshape(-1, 3)
            uv = np.zeros((n, len(cameras), len(zs), 2))
            ok = np.zeros((n, len(cameras), len(zs)), dtype=bool)
            for i, cam in enumerate(self.cameras):
                u, v, val = project_points(cam, pts)
                uv[:, i, :, 0] = u.reshape(n, len(zs))
                uv[:, i, :, 1] = v.reshape(n, len(zs))
                ok[:, i, :] = val.reshape(n, len(zs))
            uv.setflags(write=False)
            ok.setflags(write=False)
            self.uv[level] = uv
            self.valid[level] = ok

    def normalized(self, level: int) -> np.ndarray:
        """(cells, n_cams, Z, 2) normalized (u/W, v/H); invalid -> sentinel."""
        sizes = np.array(
            [[cam.width, cam.height] for cam in self.cameras], dtype=np.float64
        )
        uv = self.uv[level] / sizes[None, :, None, :]
        return np.where(self.valid[level][..., None], uv, INVALID_SENTINEL)

    def hit_mask(self, level: int) -> np.ndarray:
        """(cells, n_cams) bool: camera hit by any pillar point of the cell."""
        return self.valid[level].any(axis=2)

    def hit_set(self, level: int, cell_index: int) -> frozenset[int]:
        return frozenset(np.nonzero(self.hit_mask(level)[cell_index])[0].tolist())

    def flat_hits(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """(cell_idx, cam_idx) arrays listing every hit pair, cell-major order."""
        cells, cams = np.nonzero(self.hit_mask(level))
        return cells, cams


def precompute_projection_table(
    spec: BEVGridSpec, cameras: list[CameraModel], levels: int
) -> ProjectionTable:
    """Projections of every cell pillar of every pyramid level into every camera."""
    return ProjectionTable(spec, cameras, levels)


# ---------------------------------------------------------------------------
# camera rig construction and plain-text rig files


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# maps a forward-aligned ego frame onto camera axes: x_cam=-y_ego, y_cam=-z_ego, z_cam=x_ego
_CV_FROM_EGO = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def make_camera(
    yaw_deg: float,
    center: tuple[float, float, float],
    fx: float,
    fy: float,
    width: int,
    height: int,
) -> CameraModel:
    """Camera at `center` whose optical axis points along ego yaw `yaw_deg`."""
    r = _CV_FROM_EGO @ _rot_z(-math.radians(yaw_deg))
    c = np.asarray(center, dtype=np.float64)
    return CameraModel(
        fx=fx,
        fy=fy,
        cx=width / 2.0,
        cy=height / 2.0,
        rotation=r,
        translation=-r @ c,
        height=height,
        width=width,
    )


def desk_rig(width: int = 160, height: int = 96) -> list[CameraModel]:
    """Reference 4-camera surround rig: 90-degree yaw spacing, ~101 deg HFOV."""
    return [
        make_camera(yaw, (0.0, 0.0, 1.6), fx=66.0, fy=36.0, width=width, height=height)
        for yaw in (0.0, 90.0, 180.0, 270.0)
    ]


def save_rig(cameras: list[CameraModel], path) -> None:
    buf = io.StringIO()
    for i, cam in enumerate(cameras):
        k = (cam.fx, cam.fy, cam.cx, cam.cy)
        buf.write(f"camera {i}\n")
        buf.write("K " + " ".join(repr(float(v)) for v in k) + "\n")
        buf.write("R " + " ".join(repr(float(v)) for v in cam.rotation.ravel()) + "\n")
        buf.write("t " + " ".join(repr(float(v)) for v in cam.translation) + "\n")
        buf.write(f"size {cam.height} {cam.width}\n")
    with open(path, "w", encoding="utf-8") as f:
        f.write(buf.getvalue())


def load_rig(path) -> list[CameraModel]:
    with open(path, "r", encoding="utf-8") as f:
        tokens = f.read().split()
    cams: list[CameraModel] = []
    i = 0

    def take(n):
        nonlocal i
        if i + n > len(tokens):
            raise GeometryError(f"rig file truncated near token {i}")
        out = tokens[i : i + n]
        i += n
        return out

    while i < len(tokens):
        kw, idx = take(2)
        if kw != "camera":
            raise GeometryError(f"expected 'camera', found {kw!r}")
        if int(idx) != len(cams):
            raise GeometryError(f"camera blocks out of order at index {idx}")
        tag, fx, fy, cx, cy = take(5)
        if tag != "K":
            raise GeometryError("expected K line")
        rtag, *rvals = take(10)
        if rtag != "R":
            raise GeometryError("expected R line")
        ttag, tx, ty, tz = take(4)
        if ttag != "t":
            raise GeometryError("expected t line")
        stag, h, w = take(3)
        if stag != "size":
            raise GeometryError("expected size line")
        try:
            cams.append(
                CameraModel(
                    fx=float(fx),
                    fy=float(fy),
                    cx=float(cx),
                    cy=float(cy),
                    rotation=np.array([float(v) for v in rvals]).reshape(3, 3),
                    translation=np.array([float(tx), float(ty), float(tz)]),
                    height=int(h),
                    width=int(w),
                )
            )
        except GeometryError:
            raise
        except ValueError as e:
            raise GeometryError(f"rig file: bad number in camera {len(cams)}: {e}") from e
    if not cams:
        raise GeometryError("rig file contains no cameras")
    return cams
