from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from umpe import constants as K
from umpe.geometry import BEVGridSpec, Pose2, resample_polyline
from umpe.ingest import (
    SD_BACKGROUND,
    SD_PALETTE,
    EgoPose,
    FixtureTileClient,
    IngestError,
    LiveTileClient,
    MissingTile,
    PolylineSet,
    PriorBundle,
    RasterPrior,
    TileRef,
    choose_zoom,
    crop_ego_window,
    fetch_tiles,
    ground_resolution,
    ingest_fixtures,
    lonlat_to_tile,
    palette_array,
    rasterize_sd,
    read_bundle,
    sample_rotated,
    tile_center_lonlat,
    write_bundle,
)

GRID = BEVGridSpec()


class TestTileMath:
    def test_equator_meridian(self):
        assert lonlat_to_tile(0.0, 0.0, 1) == TileRef(1, 1, 1)

    @pytest.mark.parametrize("lat", [-80.0, 0.0, 47.0])
    def test_single_world_tile(self, lat):
        assert lonlat_to_tile(-180.0, lat, 0) == TileRef(0, 0, 0)

    def test_formula_oracle(self):
        # high-precision evaluation of the slippy-map formula, frozen
        assert lonlat_to_tile(8.5417, 47.3769, 15) == TileRef(15, 17161, 11474)

    @pytest.mark.parametrize("lat", [85.06, -90.0, float("nan")])
    def test_latitude_out_of_range(self, lat):
        with pytest.raises(IngestError):
            lonlat_to_tile(0.0, lat, 3)

    def test_tileref_bounds(self):
        with pytest.raises(IngestError):
            TileRef(2, 4, 0)

    @given(st.floats(-179.9, 179.9), st.floats(-179.9, 179.9), st.floats(-85.0, 85.0), st.integers(0, 18))
    def test_monotone_in_lon(self, a, b, lat, z):
        lo, hi = sorted((a, b))
        assert lonlat_to_tile(lo, lat, z).x <= lonlat_to_tile(hi, lat, z).x

    @given(st.integers(1, 18).flatmap(lambda z: st.tuples(st.just(z), st.integers(0, 2 ** z - 1),
                                                           st.integers(0, 2 ** z - 1))))
    def test_center_round_trip(self, zxy):
        t = TileRef(*zxy)
        lon, lat = tile_center_lonlat(t)
        if abs(lat) <= 85.0511:
            assert lonlat_to_tile(lon, lat, t.z) == t

    def test_zoom_matches_resolution(self):
        z = choose_zoom(47.0, 1.0)
        assert ground_resolution(47.0, z) <= 1.0 < ground_resolution(47.0, z - 1)


class TestCrop:
    def test_inside_unchanged(self):
        pl = np.array([[-5.0, 2.0], [3.0, 4.0], [10.0, -1.0]])
        ps = crop_ego_window([pl], [2], EgoPose(8.5, 47.4, 0.0))
        np.testing.assert_allclose(ps.points[0], resample_polyline(pl).points, atol=1e-12)
        assert ps.categories.tolist() == [2]

    def test_yaw_quarter_turn(self):
        # heading north: a point 5 m north of the ego is 5 m ahead
        pl = np.array([[0.0, 5.0], [0.0, 6.0]])
        ps = crop_ego_window([pl], [0], EgoPose(0.0, 0.0, math.pi / 2))
        np.testing.assert_allclose(ps.points[0, 0], [5.0, 0.0], atol=1e-10)

    def test_ego_translation(self):
        pl = np.array([[101.0, 50.0], [105.0, 50.0]])
        ps = crop_ego_window([pl], [0], EgoPose(0.0, 0.0, 0.0, x=100.0, y=50.0))
        np.testing.assert_allclose(ps.points[0, [0, -1]], [[1.0, 0.0], [5.0, 0.0]], atol=1e-12)

    def test_clipped_endpoint_on_boundary(self):
        pl = np.array([[0.0, 0.0], [50.0, 7.0]])
        ps = crop_ego_window([pl], [0], EgoPose(0.0, 0.0, 0.0))
        end = ps.points[0, -1]
        assert end[0] == pytest.approx(K.X_HALF, abs=1e-9)
        assert end[1] == pytest.approx(7.0 * K.X_HALF / 50.0, abs=1e-9)

    def test_split_at_boundary(self):
        # leaves the window sideways and comes back
        pl = np.array([[-20.0, 0.0], [-10.0, 30.0], [0.0, 0.0]])
        ps = crop_ego_window([pl], [1], EgoPose(0.0, 0.0, 0.0), ids=["a"])
        assert len(ps) == 2 and ps.ids == ["a.0", "a.1"]

    def test_empty_result(self):
        ps = crop_ego_window([np.array([[100.0, 100.0], [120.0, 100.0]])], [0], EgoPose(0.0, 0.0, 0.0))
        assert len(ps) == 0 and ps.points.shape == (0, K.POINTS_PER_POLYLINE, 2)

    @given(st.lists(st.tuples(st.floats(-80, 80), st.floats(-80, 80)), min_size=2, max_size=6),
           st.floats(-math.pi, math.pi))
    def test_output_within_window(self, pts, yaw):
        ps = crop_ego_window([np.array(pts)], [0], EgoPose(0.0, 0.0, yaw))
        assert np.all(np.abs(ps.points[..., 0]) <= K.X_HALF + 1e-9)
        assert np.all(np.abs(ps.points[..., 1]) <= K.Y_HALF + 1e-9)

    def test_latitude_validation(self):
        with pytest.raises(IngestError):
            EgoPose(0.0, 86.0, 0.0)


class TestRasterize:
    def test_palette_distinct(self):
        colors = {tuple(c) for c in palette_array()}
        assert len(colors) == K.NUM_SD_CLASSES == len(SD_PALETTE)
        assert tuple(SD_BACKGROUND) not in colors

    def test_empty_is_background(self):
        img = rasterize_sd(PolylineSet("sd"), GRID).image
        assert np.all(img == np.asarray(SD_BACKGROUND) / 255.0)

    def test_horizontal_line_one_row(self):
        # constant ego x runs along a single canvas row
        pl = resample_polyline(np.array([[0.5, 10.0], [0.5, -10.0]])).points
        img = rasterize_sd(PolylineSet("sd", pl[None], [0]), GRID, stroke_px=1).image
        rows = np.nonzero(img.any(-1).any(-1))[0]
        assert len(rows) == 1
        assert img[rows[0]].any(-1).sum() == 21

    def test_later_class_overdraws(self):
        across = resample_polyline(np.array([[0.5, 10.0], [0.5, -10.0]])).points
        along = resample_polyline(np.array([[10.0, 0.5], [-10.0, 0.5]])).points
        for order in ([0, 1], [1, 0]):
            pts = np.stack([across, along])[order]
            cats = np.array([2, 5])[order]
            img = rasterize_sd(PolylineSet("sd", pts, cats), GRID).image
            r, c = np.rint(GRID.ego_to_pixel(np.array([0.5, 0.5]))).astype(int)
            assert np.array_equal(np.rint(img[r, c] * 255), palette_array()[5])


def _write_tile(root, z, x, y, color, size=4):
    p = root / str(z) / str(x)
    p.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size, 3), color, dtype=np.uint8)).save(p / f"{y}.png")


class TestFetch:
    def test_fixture_client_missing(self, tmp_path):
        with pytest.raises(MissingTile):
            FixtureTileClient(tmp_path).get(3, 1, 1)

    def test_uniform_tiles_uniform_output(self, tmp_path):
        z = 10
        ego = EgoPose(8.5, 47.4, 0.4)
        t = lonlat_to_tile(ego.lon, ego.lat, z)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                _write_tile(tmp_path, z, t.x + dx, t.y + dy, (10, 200, 30))
        out = fetch_tiles(ego, z, FixtureTileClient(tmp_path, tile_size=4), GRID)
        assert not out.missing
        assert np.all(out.image == np.array([10, 200, 30], dtype=np.uint8))

    def test_missing_tile_background_and_flag(self, tmp_path):
        z = 10
        ego = EgoPose(8.5, 47.4, 0.0)
        out = fetch_tiles(ego, z, FixtureTileClient(tmp_path, tile_size=4), GRID, background=(1, 2, 3))
        assert out.missing
        assert np.all(out.image == np.array([1, 2, 3], dtype=np.uint8))

    def test_quarter_turn_is_rotated_stitch(self):
        g = BEVGridSpec(32, 32, 1.0, 1.0)
        mosaic = np.random.default_rng(0).integers(0, 255, (64, 64, 3), dtype=np.uint8)
        east_up = sample_rotated(mosaic, 32.0, 32.0, 0.0, 1.0, g)
        north_up = sample_rotated(mosaic, 32.0, 32.0, math.pi / 2, 1.0, g)
        assert np.array_equal(north_up, np.rot90(east_up, -1))

    def test_live_client_needs_token(self, monkeypatch):
        monkeypatch.delenv("UMPE_TILE_TOKEN", raising=False)
        with pytest.raises(IngestError):
            LiveTileClient("https://tiles.invalid/{z}/{x}/{y}.png?key={token}")


class TestBundle:
    def _bundle(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(0, 5, (3, K.POINTS_PER_POLYLINE, 2))
        img = rng.integers(0, 256, (GRID.height, GRID.width, 3)) / 255.0
        return PriorBundle("f1", PolylineSet("hd", pts, [0, 0, 0]), PolylineSet("sd", pts[:2], [3, 7]),
                           RasterPrior(img, "sat", 1.0, 1.0), RasterPrior(img[::-1].copy(), "rsd", 1.0, 1.0),
                           {"hd": 1, "sd": 1, "sat": 0, "rsd": 1}, drift={"hd": Pose2(0.1, -0.2, 0.01)},
                           ego=EgoPose(8.5, 47.4, 0.3), obs=rng.normal(size=(3, 4, 5)).astype(np.float32))

    def test_round_trip_lossless(self, tmp_path):
        b = self._bundle()
        r = read_bundle(write_bundle(tmp_path / "f1", b))
        assert np.array_equal(r.hd.points, b.hd.points) and np.array_equal(r.sd.categories, b.sd.categories)
        assert np.array_equal(r.sat.image, b.sat.image) and np.array_equal(r.rsd.image, b.rsd.image)
        assert r.presence == b.presence and r.drift == b.drift and r.ego == b.ego
        assert np.array_equal(r.obs, b.obs)

    def test_rewrite_is_byte_identical(self, tmp_path):
        b = self._bundle()
        a = write_bundle(tmp_path / "a", b)
        c = write_bundle(tmp_path / "c", read_bundle(a))
        for name in ("meta.json", "hd.jsonl", "sd.jsonl", "sat.png", "sd_raster.png", "obs.npy"):
            assert (a / name).read_bytes() == (c / name).read_bytes(), name

    def test_record_format(self, tmp_path):
        d = write_bundle(tmp_path / "f", self._bundle())
        rec = json.loads((d / "sd.jsonl").read_text().splitlines()[1])
        assert set(rec) == {"id", "category", "points", "source"}
        assert rec["category"] == 7 and rec["source"] == "sd"


class TestIngestFixtures:
    def _fixture(self, root, with_tiles=True):
        root.mkdir()
        frames = [{"frame_id": "a", "lon": 8.5, "lat": 47.4, "yaw": 0.0, "x": 0.0, "y": 0.0},
                  {"frame_id": "b", "lon": 8.5, "lat": 47.4, "yaw": math.pi / 2, "x": 5.0, "y": 0.0}]
        (root / "frames.jsonl").write_text("".join(json.dumps(f) + "\n" for f in frames))
        sd = [{"id": "r1", "category": 2, "points": [[-40.0, 1.0], [40.0, 1.0]]}]
        (root / "sd_polylines.jsonl").write_text("".join(json.dumps(r) + "\n" for r in sd))
        if with_tiles:
            z = choose_zoom(47.4, 1.0)
            t = lonlat_to_tile(8.5, 47.4, z)
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    _write_tile(root / "tiles", z, t.x + dx, t.y + dy, (90, 90, 90), size=256)

    def test_writes_bundles(self, tmp_path):
        self._fixture(tmp_path / "src")
        paths = ingest_fixtures(tmp_path / "src", tmp_path / "out")
        assert [p.name for p in paths] == ["a", "b"]
        a = read_bundle(paths[0])
        assert a.presence == {"hd": 0, "sd": 1, "sat": 1, "rsd": 1}
        assert len(a.sd) == 1 and a.rsd.image.any()
        assert "missing_tiles" not in a.flags

    def test_missing_tiles_flagged(self, tmp_path):
        self._fixture(tmp_path / "src", with_tiles=False)
        a = read_bundle(ingest_fixtures(tmp_path / "src", tmp_path / "out")[0])
        assert a.flags["missing_tiles"]
        assert a.presence["sat"] == 0

    def test_no_frames(self, tmp_path):
        with pytest.raises(IngestError):
            ingest_fixtures(tmp_path, tmp_path / "out")
