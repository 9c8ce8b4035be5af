"""Procedural multi-camera scenes with exact bird's-eye-view ground truth.

A scene is a rounded-rectangle road with lane lines, plus vehicles (boxes) on
the road and pedestrians (cylinders) on the shoulders. Cameras render it with
a painter's-algorithm rasterizer: flat shading, per-object albedo, depth
sorting, near-plane clipping. Ground-truth BEV maps are computed analytically
from the same metadata — a cell is set iff its center lies inside the class
footprint, with no rasterization approximation.

Datasets persist to a little-endian binary format (magic ``BEVD1``) holding
f32 images, bit-packed maps, and the scene metadata as JSON.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import CLASS_NAMES
from .geometry import BEVGridSpec, CameraModel

CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

NEAR_PLANE = 0.05  # meters; camera-space z below this is clipped
LANE_HALF_WIDTH = 0.3  # meters, for ground-truth rasterization
PLACEMENT_TRIES = 200

DATASET_MAGIC = b"BEVD1"

# flat albedo per class; individual objects get a small stored shade factor
_COLORS = {
    "ground": np.array([0.32, 0.36, 0.30]),
    "sky": np.array([0.70, 0.78, 0.88]),
    "drivable": np.array([0.48, 0.48, 0.50]),
    "lane": np.array([0.85, 0.20, 0.18]),
    "vehicle": np.array([0.95, 0.55, 0.12]),
    "pedestrian": np.array([0.18, 0.32, 0.88]),
}

_LIGHT_DIR = np.array([0.35, 0.25, 0.90])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)


class SceneError(RuntimeError):
    """Scene generation could not satisfy a placement constraint."""


class DatasetError(RuntimeError):
    """Malformed or truncated dataset file."""


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for one generated scene; extent must match the BEV grid in use."""

    seed: int
    extent: float = 40.0
    classes: tuple = CLASS_NAMES
    vehicle_range: tuple = (2, 8)
    pedestrian_range: tuple = (0, 6)
    lane_range: tuple = (2, 6)


@dataclass
class SceneSample:
    """Rendered images, per-class binary BEV maps, and the generating metadata."""

    images: np.ndarray  # (N_c, H, W, 3) float32 in [0, 1]
    maps: dict  # class name -> (X, Y) uint8
    metadata: dict


# ---------------------------------------------------------------------------
# plan-view footprint helpers (shared by placement, ground truth, and tests)


def _road_frame(point_xy, road):
    """World (x, y) -> road-local coordinates."""
    c, s = np.cos(road["yaw"]), np.sin(road["yaw"])
    p = np.atleast_2d(point_xy) - np.asarray(road["center"])
    return np.stack([c * p[:, 0] + s * p[:, 1], -s * p[:, 0] + c * p[:, 1]], axis=1)


def road_signed_distance(point_xy, road) -> np.ndarray:
    """Signed distance to the rounded-rectangle road edge (negative inside)."""
    local = _road_frame(point_xy, road)
    r = road["corner_r"]
    ax = road["half_len"] - r
    ay = road["half_wid"] - r
    dx = np.abs(local[:, 0]) - ax
    dy = np.abs(local[:, 1]) - ay
    outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
    inside = np.minimum(np.maximum(dx, dy), 0.0)
    return outside + inside - r


def point_in_road(point_xy, road) -> np.ndarray:
    return road_signed_distance(point_xy, road) <= 0.0


def rect_corners(center, yaw: float, length: float, width: float) -> np.ndarray:
    """(4, 2) plan-view corners of an oriented rectangle, counter-clockwise."""
    c, s = np.cos(yaw), np.sin(yaw)
    hx, hy = length / 2.0, width / 2.0
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center)


def point_in_rect(point_xy, center, yaw: float, length: float, width: float):
    c, s = np.cos(yaw), np.sin(yaw)
    p = np.atleast_2d(point_xy) - np.asarray(center)
    lx = c * p[:, 0] + s * p[:, 1]
    ly = -s * p[:, 0] + c * p[:, 1]
    return (np.abs(lx) <= length / 2.0) & (np.abs(ly) <= width / 2.0)


def rects_overlap(a, b, margin: float = 0.0) -> bool:
    """Separating-axis test for two oriented plan-view rectangles."""
    ca = rect_corners(a["center"], a["yaw"], a["length"] + 2 * margin, a["width"] + 2 * margin)
    cb = rect_corners(b["center"], b["yaw"], b["length"], b["width"])
    for corners in (ca, cb):
        for i in range(2):  # two distinct edge directions per rectangle
            edge = corners[i + 1] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def polyline_distance(point_xy, points) -> np.ndarray:
    """Distance from each query point to the nearest segment of a polyline."""
    q = np.atleast_2d(point_xy)
    pts = np.asarray(points)
    best = np.full(q.shape[0], np.inf)
    for i in range(len(pts) - 1):
        a, b = pts[i], pts[i + 1]
        ab = b - a
        denom = float(ab @ ab)
        t = np.clip(((q - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(q.shape[0])
        close = a + t[:, None] * ab
        best = np.minimum(best, np.hypot(*(q - close).T))
    return best


# ---------------------------------------------------------------------------
# scene generation


def generate_scene(spec: SceneSpec) -> dict:
    """Sample one scene layout; deterministic in spec.seed.

    Vehicles are placed entirely on the drivable area, pairwise non-overlapping
    in plan view; pedestrians go on a shoulder band just off the road edge.
    """
    rng = np.random.default_rng(spec.seed)
    half = spec.extent / 2.0

    road = {
        "center": rng.uniform(-2.0, 2.0, size=2).tolist(),
        "yaw": float(rng.uniform(0.0, np.pi)),
        "half_len": float(rng.uniform(10.0, 14.0)),
        "half_wid": float(rng.uniform(5.5, 8.0)),
        "corner_r": float(rng.uniform(2.0, 4.0)),
    }

    n_lanes = int(rng.integers(spec.lane_range[0], spec.lane_range[1] + 1))
    reach_y = road["half_wid"] - road["corner_r"] - 0.7
    offsets = np.linspace(-reach_y, reach_y, n_lanes)
    reach_x = road["half_len"] - road["corner_r"] - 0.3
    xs = np.linspace(-reach_x, reach_x, max(int(np.ceil(reach_x)) + 1, 2))
    c, s = np.cos(road["yaw"]), np.sin(road["yaw"])
    rot = np.array([[c, -s], [s, c]])
    lanes = []
    for off in offsets:
        local = np.stack([xs, np.full_like(xs, off)], axis=1)
        world = local @ rot.T + np.asarray(road["center"])
        lanes.append({"points": world.tolist(), "shade": float(rng.uniform(0.9, 1.1))})

    vehicles = []
    n_veh = int(rng.integers(spec.vehicle_range[0], spec.vehicle_range[1] + 1))
    for i in range(n_veh):
        for _ in range(PLACEMENT_TRIES):
            local = rng.uniform(
                [-road["half_len"] + 1.0, -road["half_wid"] + 1.0],
                [road["half_len"] - 1.0, road["half_wid"] - 1.0],
            )
            center = rot @ local + np.asarray(road["center"])
            cand = {
                "center": center.tolist(),
                "yaw": float(road["yaw"] + rng.choice([0.0, np.pi]) + rng.normal(0.0, 0.08)),
                "length": float(rng.uniform(3.5, 5.5)),
                "width": float(rng.uniform(1.6, 2.2)),
                "height": float(rng.uniform(1.4, 1.9)),
                "shade": float(rng.uniform(0.85, 1.15)),
            }
            corners = rect_corners(cand["center"], cand["yaw"], cand["length"], cand["width"])
            if not point_in_road(corners, road).all():
                continue
            if np.abs(center).max() > half - 1.0:
                continue
            if any(rects_overlap(cand, v, margin=0.25) for v in vehicles):
                continue
            vehicles.append(cand)
            break
        else:
            raise SceneError(
                f"could not place vehicle {i} on the drivable area without "
                f"overlap after {PLACEMENT_TRIES} attempts"
            )

    pedestrians = []
    n_ped = int(rng.integers(spec.pedestrian_range[0], spec.pedestrian_range[1] + 1))
    for i in range(n_ped):
        for _ in range(PLACEMENT_TRIES):
            local = rng.uniform(
                [-road["half_len"] - 2.5, -road["half_wid"] - 2.5],
                [road["half_len"] + 2.5, road["half_wid"] + 2.5],
            )
            center = rot @ local + np.asarray(road["center"])
            d = float(road_signed_distance(center[None], road)[0])
            if not (0.35 <= d <= 3.0):
                continue
            if np.abs(center).max() > half - 0.6:
                continue
            if any(
                np.hypot(*(center - np.asarray(p["center"]))) < 0.8 for p in pedestrians
            ):
                continue
            pedestrians.append(
                {
                    "center": center.tolist(),
                    "radius": 0.3,
                    "height": 1.7,
                    "shade": float(rng.uniform(0.85, 1.15)),
                }
            )
            break
        else:
            raise SceneError(
                f"could not place pedestrian {i} on the shoulder band "
                f"after {PLACEMENT_TRIES} attempts"
            )

    return {
        "seed": int(spec.seed),
        "extent": float(spec.extent),
        "classes": list(spec.classes),
        "road": road,
        "lanes": lanes,
        "vehicles": vehicles,
        "pedestrians": pedestrians,
    }


# ---------------------------------------------------------------------------
# ground-truth BEV rasterization (exact, cell-center inclusion)


def render_gt_bev(metadata: dict, grid: BEVGridSpec, class_name: str) -> np.ndarray:
    """Binary (X, Y) map: cell set iff its center is inside the class footprint."""
    if class_name not in CLASS_IDS:
        raise SceneError(f"unknown class {class_name!r}; expected one of {CLASS_NAMES}")
    centers = grid.cell_centers(1)
    rows, cols = grid.level_shape(1)
    hit = np.zeros(centers.shape[0], dtype=bool)

    if class_name == "drivable":
        hit = point_in_road(centers, metadata["road"])
    elif class_name == "lane":
        for lane in metadata["lanes"]:
            hit |= polyline_distance(centers, lane["points"]) <= LANE_HALF_WIDTH
    elif class_name == "vehicle":
        for v in metadata["vehicles"]:
            hit |= point_in_rect(centers, v["center"], v["yaw"], v["length"], v["width"])
    elif class_name == "pedestrian":
        for p in metadata["pedestrians"]:
            d = np.hypot(centers[:, 0] - p["center"][0], centers[:, 1] - p["center"][1])
            hit |= d <= p["radius"]

    return hit.reshape(rows, cols).astype(np.uint8)


# ---------------------------------------------------------------------------
# camera rendering: painter's algorithm over convex polygons


def _clip_near(poly_cam: np.ndarray, near: float = NEAR_PLANE) -> np.ndarray:
    """Clip a camera-space polygon against the z >= near halfspace."""
    out = []
    n = len(poly_cam)
    for i in range(n):
        a, b = poly_cam[i], poly_cam[(i + 1) % n]
        ain, bin_ = a[2] >= near, b[2] >= near
        if ain:
            out.append(a)
        if ain != bin_:
            t = (near - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out) if out else np.empty((0, 3))


def _fill_convex(img: np.ndarray, poly_px: np.ndarray, color: np.ndarray) -> None:
    """Paint a convex polygon given in continuous pixel coordinates (u, v)."""
    if len(poly_px) < 3:
        return
    h, w = img.shape[:2]
    # consistent winding so all edge cross-products share a sign
    area = 0.0
    n = len(poly_px)
    for i in range(n):
        a, b = poly_px[i], poly_px[(i + 1) % n]
        area += a[0] * b[1] - b[0] * a[1]
    if area < 0:
        poly_px = poly_px[::-1]

    x0 = max(int(np.floor(poly_px[:, 0].min() - 0.5)), 0)
    x1 = min(int(np.ceil(poly_px[:, 0].max() + 0.5)), w - 1)
    y0 = max(int(np.floor(poly_px[:, 1].min() - 0.5)), 0)
    y1 = min(int(np.ceil(poly_px[:, 1].max() + 0.5)), h - 1)
    if x1 < x0 or y1 < y0:
        return
    us = np.arange(x0, x1 + 1) + 0.5
    vs = np.arange(y0, y1 + 1) + 0.5
    uu, vv = np.meshgrid(us, vs)
    inside = np.ones(uu.shape, dtype=bool)
    for i in range(n):
        a, b = poly_px[i], poly_px[(i + 1) % n]
        inside &= (b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0]) >= 0.0
    img[y0 : y1 + 1, x0 : x1 + 1][inside] = color


def _gather_polygons(metadata: dict) -> list:
    """Scene as (points3d, color, shaded) world-space polygons, draw-order layers.

    Returns (flat_layers, faces): flat ground geometry painted first in list
    order, then object faces depth-sorted per camera.
    """
    ext = metadata["extent"]
    big = 3.0 * ext
    ground = np.array([[-big, -big, 0], [big, -big, 0], [big, big, 0], [-big, big, 0]], float)
    flat = [(ground, _COLORS["ground"])]

    road = metadata["road"]
    # polygonal outline of the rounded rectangle (8 arc points per corner)
    r = road["corner_r"]
    ax, ay = road["half_len"] - r, road["half_wid"] - r
    outline = []
    for cx, cy, a0 in ((ax, ay, 0.0), (-ax, ay, 90.0), (-ax, -ay, 180.0), (ax, -ay, 270.0)):
        for ang in np.radians(np.linspace(a0, a0 + 90.0, 9)[:-1]):
            outline.append([cx + r * np.cos(ang), cy + r * np.sin(ang)])
    outline = np.asarray(outline)
    c, s = np.cos(road["yaw"]), np.sin(road["yaw"])
    rot = np.array([[c, -s], [s, c]])
    world = outline @ rot.T + np.asarray(road["center"])
    road_poly = np.column_stack([world, np.full(len(world), 0.004)])
    flat.append((road_poly, _COLORS["drivable"]))

    for lane in metadata["lanes"]:
        pts = np.asarray(lane["points"])
        color = np.clip(_COLORS["lane"] * lane.get("shade", 1.0), 0.0, 1.0)
        for i in range(len(pts) - 1):
            a, b = pts[i], pts[i + 1]
            d = b - a
            norm = np.hypot(*d)
            if norm < 1e-9:
                continue
            perp = np.array([-d[1], d[0]]) / norm * 0.125
            quad = np.array([a + perp, b + perp, b - perp, a - perp])
            flat.append((np.column_stack([quad, np.full(4, 0.008)]), color))

    faces = []  # (points3d, base_color, normal) — shaded and depth-sorted later
    for v in metadata["vehicles"]:
        corners = rect_corners(v["center"], v["yaw"], v["length"], v["width"])
        lo = np.column_stack([corners, np.zeros(4)])
        hi = np.column_stack([corners, np.full(4, v["height"])])
        color = np.clip(_COLORS["vehicle"] * v.get("shade", 1.0), 0.0, 1.0)
        faces.append((hi, color, np.array([0.0, 0.0, 1.0])))
        for i in range(4):
            j = (i + 1) % 4
            quad = np.array([lo[i], lo[j], hi[j], hi[i]])
            edge = corners[j] - corners[i]
            normal = np.array([edge[1], -edge[0], 0.0])
            normal /= np.linalg.norm(normal)
            faces.append((quad, color, normal))
    return flat, faces


def render_camera_views(metadata: dict, cameras: list[CameraModel]) -> np.ndarray:
    """Rasterize the scene through every camera; (N_c, H, W, 3) float32."""
    flat, box_faces = _gather_polygons(metadata)
    h, w = cameras[0].height, cameras[0].width
    images = np.empty((len(cameras), h, w, 3), dtype=np.float32)

    for ci, cam in enumerate(cameras):
        img = np.empty((h, w, 3), dtype=np.float32)
        img[:] = _COLORS["sky"]
        eye = cam.center()

        def draw(points3d, color):
            cam_pts = points3d @ cam.rotation.T + cam.translation
            clipped = _clip_near(cam_pts)
            if len(clipped) < 3:
                return
            z = clipped[:, 2]
            px = np.stack(
                [cam.fx * clipped[:, 0] / z + cam.cx, cam.fy * clipped[:, 1] / z + cam.cy],
                axis=1,
            )
            _fill_convex(img, px, color)

        for poly, color in flat:
            draw(poly, color)

        faces = list(box_faces)
        for p in metadata["pedestrians"]:
            # billboard: a vertical rectangle facing the camera
            center = np.asarray(p["center"])
            to_obj = center - eye[:2]
            dist = np.hypot(*to_obj)
            fwd = to_obj / dist if dist > 1e-9 else np.array([1.0, 0.0])
            right = np.array([-fwd[1], fwd[0]]) * p["radius"]
            quad = np.array(
                [
                    [*(center - right), 0.0],
                    [*(center + right), 0.0],
                    [*(center + right), p["height"]],
                    [*(center - right), p["height"]],
                ]
            )
            color = np.clip(_COLORS["pedestrian"] * p.get("shade", 1.0), 0.0, 1.0)
            faces.append((quad, color, np.array([-fwd[0], -fwd[1], 0.0])))

        def depth(face):
            centroid = face[0].mean(axis=0)
            return float(cam.rotation[2] @ centroid + cam.translation[2])

        for quad, color, normal in sorted(faces, key=depth, reverse=True):
            view = quad.mean(axis=0) - eye
            if normal @ view >= 0.0:  # back-facing on a convex solid
                continue
            shade = 0.55 + 0.45 * max(float(normal @ _LIGHT_DIR), 0.0)
            draw(quad, np.clip(color * shade, 0.0, 1.0))

        images[ci] = img
    return images


def make_sample(spec: SceneSpec, cameras: list[CameraModel], grid: BEVGridSpec) -> SceneSample:
    """Generate, render, and rasterize one complete sample."""
    meta = generate_scene(spec)
    images = render_camera_views(meta, cameras)
    maps = {name: render_gt_bev(meta, grid, name) for name in spec.classes}
    return SceneSample(images=images, maps=maps, metadata=meta)


# ---------------------------------------------------------------------------
# dataset persistence


def save_dataset(samples: list[SceneSample], path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(samples)))
        for sample in samples:
            imgs = np.ascontiguousarray(sample.images, dtype=np.float32)
            nc, h, w, _ = imgs.shape
            fh.write(struct.pack("<III", nc, h, w))
            fh.write(imgs.tobytes())
            fh.write(struct.pack("<I", len(sample.maps)))
            for name in sorted(sample.maps, key=lambda n: CLASS_IDS[n]):
                m = np.ascontiguousarray(sample.maps[name], dtype=np.uint8)
                fh.write(struct.pack("<BII", CLASS_IDS[name], m.shape[0], m.shape[1]))
                fh.write(np.packbits(m, axis=1).tobytes())
            blob = json.dumps(sample.metadata, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


class _Reader:
    """Byte cursor that reports its offset in every failure."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise DatasetError(
                f"{self.path}: truncated at byte {self.off} "
                f"(wanted {n} more, file has {len(self.data)})"
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


_NAME_BY_ID = {i: name for name, i in CLASS_IDS.items()}


def load_dataset(path: str) -> list[SceneSample]:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise DatasetError(f"{path}: bad magic at byte 0, expected {DATASET_MAGIC!r}")
    (count,) = rd.unpack("I")
    samples = []
    for _ in range(count):
        nc, h, w = rd.unpack("III")
        if not (0 < nc <= 64 and 0 < h <= 4096 and 0 < w <= 4096):
            raise DatasetError(
                f"{path}: implausible image header ({nc}, {h}, {w}) at byte {rd.off - 12}"
            )
        raw = rd.take(nc * h * w * 3 * 4)
        images = np.frombuffer(raw, dtype="<f4").reshape(nc, h, w, 3).copy()
        (nclass,) = rd.unpack("I")
        maps = {}
        for _ in range(nclass):
            cid, x, y = rd.unpack("BII")
            if cid not in _NAME_BY_ID:
                raise DatasetError(f"{path}: unknown class id {cid} at byte {rd.off - 9}")
            packed = np.frombuffer(rd.take(x * ((y + 7) // 8)), dtype=np.uint8)
            maps[_NAME_BY_ID[cid]] = np.unpackbits(
                packed.reshape(x, (y + 7) // 8), axis=1, count=y
            )
        (blob_len,) = rd.unpack("I")
        metadata = json.loads(rd.take(blob_len).decode("utf-8"))
        samples.append(SceneSample(images=images, maps=maps, metadata=metadata))
    return samples


def generate_dataset(
    count: int, base_seed: int, cameras: list[CameraModel], grid: BEVGridSpec, **spec_kw
) -> list[SceneSample]:
    """`count` samples with seeds base_seed, base_seed+1, ..."""
    return [
        make_sample(SceneSpec(seed=base_seed + i, **spec_kw), cameras, grid)
        for i in range(count)
    ]
