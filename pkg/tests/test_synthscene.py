"""Scene generation, exact BEV ground truth, rasterizer, dataset files."""
import json

import numpy as np
import pytest

from bevrefine.config import CLASS_NAMES
from bevrefine.geometry import BEVGridSpec, desk_rig, project_to_image
from bevrefine.synthscene import (
    DatasetError,
    LANE_HALF_WIDTH,
    SceneError,
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_dataset,
    make_sample,
    render_camera_views,
    render_gt_bev,
    save_dataset,
)

GRID = BEVGridSpec(x_cells=24, y_cells=24, length_m=40.0, width_m=40.0, channels=8)


# --- independent footprint membership, deliberately different formulations ---


def in_road_oracle(pt, road):
    """Rounded rectangle as distance-to-core-rectangle <= corner radius."""
    c, s = np.cos(road["yaw"]), np.sin(road["yaw"])
    dx = pt[0] - road["center"][0]
    dy = pt[1] - road["center"][1]
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    r = road["corner_r"]
    qx = min(max(lx, -(road["half_len"] - r)), road["half_len"] - r)
    qy = min(max(ly, -(road["half_wid"] - r)), road["half_wid"] - r)
    return np.hypot(lx - qx, ly - qy) <= r


def in_lane_oracle(pt, lanes):
    for lane in lanes:
        pts = lane["points"]
        for a, b in zip(pts, pts[1:]):
            ax, ay = a
            bx, by = b
            vx, vy = bx - ax, by - ay
            denom = vx * vx + vy * vy
            t = 0.0 if denom == 0 else (vx * (pt[0] - ax) + vy * (pt[1] - ay)) / denom
            t = min(max(t, 0.0), 1.0)
            if np.hypot(pt[0] - (ax + t * vx), pt[1] - (ay + t * vy)) <= LANE_HALF_WIDTH:
                return True
    return False


def in_vehicle_oracle(pt, vehicles):
    for v in vehicles:
        rot = np.array(
            [
                [np.cos(v["yaw"]), -np.sin(v["yaw"])],
                [np.sin(v["yaw"]), np.cos(v["yaw"])],
            ]
        )
        local = rot.T @ (np.asarray(pt) - np.asarray(v["center"]))
        if abs(local[0]) <= v["length"] / 2 and abs(local[1]) <= v["width"] / 2:
            return True
    return False


def in_pedestrian_oracle(pt, peds):
    return any(
        np.hypot(pt[0] - p["center"][0], pt[1] - p["center"][1]) <= p["radius"]
        for p in peds
    )


class TestSceneGeneration:
    def test_deterministic_in_seed(self):
        a = generate_scene(SceneSpec(seed=42))
        b = generate_scene(SceneSpec(seed=42))
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        c = generate_scene(SceneSpec(seed=43))
        assert json.dumps(a, sort_keys=True) != json.dumps(c, sort_keys=True)

    @pytest.mark.parametrize("seed", [0, 7, 191])
    def test_placement_invariants(self, seed):
        meta = generate_scene(SceneSpec(seed=seed))
        road = meta["road"]
        for v in meta["vehicles"]:
            # whole footprint on the road: corners suffice (road is convex)
            c, s = np.cos(v["yaw"]), np.sin(v["yaw"])
            rot = np.array([[c, -s], [s, c]])
            hl, hw = v["length"] / 2, v["width"] / 2
            for corner in ([hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]):
                world = rot @ np.asarray(corner) + np.asarray(v["center"])
                assert in_road_oracle(world, road)
        for p in meta["pedestrians"]:
            assert not in_road_oracle(p["center"], road)

    def test_impossible_placement_reports_object(self):
        with pytest.raises(SceneError, match="vehicle"):
            generate_scene(SceneSpec(seed=0, extent=14.0, vehicle_range=(30, 30)))


class TestGroundTruth:
    @pytest.mark.parametrize("seed", [3, 12])
    def test_matches_cell_center_enumeration(self, seed):
        meta = generate_scene(SceneSpec(seed=seed))
        centers = GRID.cell_centers(1)
        oracles = {
            "drivable": lambda pt: in_road_oracle(pt, meta["road"]),
            "lane": lambda pt: in_lane_oracle(pt, meta["lanes"]),
            "vehicle": lambda pt: in_vehicle_oracle(pt, meta["vehicles"]),
            "pedestrian": lambda pt: in_pedestrian_oracle(pt, meta["pedestrians"]),
        }
        for name, fn in oracles.items():
            got = render_gt_bev(meta, GRID, name)
            want = np.array([fn(pt) for pt in centers], dtype=np.uint8)
            np.testing.assert_array_equal(got, want.reshape(24, 24), err_msg=name)

    def test_class_containment(self):
        meta = generate_scene(SceneSpec(seed=5))
        drivable = render_gt_bev(meta, GRID, "drivable")
        for name in ("lane", "vehicle"):
            inside = render_gt_bev(meta, GRID, name)
            assert not (inside & ~drivable).any(), f"{name} cells leak off the road"
        ped = render_gt_bev(meta, GRID, "pedestrian")
        assert not (ped & drivable).any()

    def test_unknown_class_rejected(self):
        with pytest.raises(SceneError, match="unknown class"):
            render_gt_bev(generate_scene(SceneSpec(seed=1)), GRID, "bicycle")


class TestRenderer:
    def crafted(self, vehicles=(), pedestrians=()):
        return {
            "seed": 0,
            "extent": 40.0,
            "classes": list(CLASS_NAMES),
            "road": {
                "center": [0.0, 0.0],
                "yaw": 0.0,
                "half_len": 12.0,
                "half_wid": 7.0,
                "corner_r": 3.0,
            },
            "lanes": [],
            "vehicles": list(vehicles),
            "pedestrians": list(pedestrians),
        }

    @staticmethod
    def vehicle_mask(img):
        r, g, b = img[..., 0], img[..., 1], img[..., 2]
        return (r > 0.4) & (r > g + 0.15) & (g > b + 0.08)

    @staticmethod
    def pedestrian_mask(img):
        r, g, b = img[..., 0], img[..., 1], img[..., 2]
        return (b > r + 0.25) & (b > 0.35)

    def test_vehicle_appears_where_projected(self):
        cams = desk_rig()
        veh = {
            "center": [6.0, 0.0],
            "yaw": 0.0,
            "length": 3.5,
            "width": 1.8,
            "height": 1.5,
            "shade": 1.0,
        }
        images = render_camera_views(self.crafted(vehicles=[veh]), cams)
        assert images.dtype == np.float32
        assert images.min() >= 0.0 and images.max() <= 1.0

        mask = self.vehicle_mask(images[0])
        assert mask.sum() > 40, "vehicle blob missing in the facing camera"
        u, v, valid = project_to_image(cams[0], [6.0, 0.0, 0.75])
        assert valid
        vs, us = np.nonzero(mask)
        assert us.min() - 2 <= u <= us.max() + 2
        assert vs.min() - 2 <= v <= vs.max() + 2
        assert abs(us.mean() - u) < 6.0
        assert abs(vs.mean() - v) < 8.0
        for ci in (1, 2, 3):
            assert not self.vehicle_mask(images[ci]).any(), f"ghost vehicle in cam {ci}"

    def test_pedestrian_appears_where_projected(self):
        cams = desk_rig()
        ped = {"center": [0.0, 4.0], "radius": 0.3, "height": 1.7, "shade": 1.0}
        images = render_camera_views(self.crafted(pedestrians=[ped]), cams)
        side = next(
            ci
            for ci, cam in enumerate(cams)
            if project_to_image(cam, [0.0, 4.0, 0.85])[2]
        )
        mask = self.pedestrian_mask(images[side])
        assert mask.sum() > 20
        u, v, _ = project_to_image(cams[side], [0.0, 4.0, 0.85])
        vs, us = np.nonzero(mask)
        assert abs(us.mean() - u) < 5.0
        assert abs(vs.mean() - v) < 6.0

    def test_empty_scene_is_ground_road_sky(self):
        images = render_camera_views(self.crafted(), desk_rig(width=64, height=40))
        assert not self.vehicle_mask(images).any()
        assert not self.pedestrian_mask(images).any()


class TestDatasetFiles:
    def small(self, count=2, seed=11):
        cams = desk_rig(width=32, height=24)
        grid = BEVGridSpec(x_cells=16, y_cells=16, length_m=40.0, width_m=40.0, channels=8)
        return generate_dataset(count, seed, cams, grid)

    def test_round_trip_bit_exact(self, tmp_path):
        samples = self.small()
        p = tmp_path / "d.bin"
        save_dataset(samples, str(p))
        loaded = load_dataset(str(p))
        assert len(loaded) == 2
        for a, b in zip(samples, loaded):
            np.testing.assert_array_equal(
                np.asarray(a.images, dtype=np.float32), b.images
            )
            assert sorted(a.maps) == sorted(b.maps)
            for name in a.maps:
                np.testing.assert_array_equal(a.maps[name], b.maps[name])
            assert json.dumps(a.metadata, sort_keys=True) == json.dumps(
                b.metadata, sort_keys=True
            )
        # re-serializing the loaded samples reproduces the file byte for byte
        p2 = tmp_path / "d2.bin"
        save_dataset(loaded, str(p2))
        assert p.read_bytes() == p2.read_bytes()

    def test_generation_deterministic(self, tmp_path):
        pa, pb = tmp_path / "a.bin", tmp_path / "b.bin"
        save_dataset(self.small(), str(pa))
        save_dataset(self.small(), str(pb))
        assert pa.read_bytes() == pb.read_bytes()

    def test_sample_seeds_advance(self):
        samples = self.small(count=3, seed=100)
        assert [s.metadata["seed"] for s in samples] == [100, 101, 102]

    def test_empty_dataset_round_trips(self, tmp_path):
        p = tmp_path / "empty.bin"
        save_dataset([], str(p))
        assert load_dataset(str(p)) == []

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(self.small(count=1), str(p))
        data = bytearray(p.read_bytes())
        data[0] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(DatasetError, match="bad magic at byte 0"):
            load_dataset(str(p))

    def test_truncation_reports_offset(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(self.small(count=1), str(p))
        p.write_bytes(p.read_bytes()[:20])
        with pytest.raises(DatasetError, match=r"truncated at byte \d+"):
            load_dataset(str(p))

    def test_unknown_class_id_reports_offset(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(self.small(count=1), str(p))
        data = bytearray(p.read_bytes())
        # magic(5) count(4) image header(12) pixels(4*24*32*3*4) nclass(4)
        cid_at = 5 + 4 + 12 + 4 * 24 * 32 * 3 * 4 + 4
        data[cid_at] = 77
        p.write_bytes(bytes(data))
        with pytest.raises(DatasetError, match=f"unknown class id 77 at byte {cid_at}"):
            load_dataset(str(p))

    def test_implausible_header_rejected(self, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(self.small(count=1), str(p))
        data = bytearray(p.read_bytes())
        data[9:13] = (0).to_bytes(4, "little")  # camera count 0
        p.write_bytes(bytes(data))
        with pytest.raises(DatasetError, match="implausible image header"):
            load_dataset(str(p))


class TestMakeSample:
    def test_maps_cover_requested_classes(self):
        cams = desk_rig(width=32, height=24)
        grid = BEVGridSpec(x_cells=16, y_cells=16, length_m=40.0, width_m=40.0, channels=8)
        sample = make_sample(SceneSpec(seed=2), cams, grid)
        assert sorted(sample.maps) == sorted(CLASS_NAMES)
        assert sample.images.shape == (4, 24, 32, 3)
        for m in sample.maps.values():
            assert m.shape == (16, 16)
            assert set(np.unique(m)) <= {0, 1}
