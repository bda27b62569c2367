"""Real-data path: ego projection and crop, slippy-map tiles, SD rasterization, bundles.

Bundle directory layout (one directory per frame)::

    meta.json        frame_id, ego pose, presence flags, mpp, drift (synthetic only)
    hd.jsonl         one polyline per line: id, category, points (P x 2), source
    sd.jsonl         same schema
    sat.png          satellite raster, lossless RGB
    sd_raster.png    rasterized SD, lossless RGB

Synthetic frames additionally carry ``gt.jsonl`` (world elements) and
``obs.npy`` (the corrupted BEV observation).
"""
from __future__ import annotations

import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from umpe import constants as K
from umpe.geometry import BEVGridSpec, Pose2, clip_polyline, resample_polyline

log = logging.getLogger(__name__)

MERCATOR_MAX_LAT = 85.0511
EARTH_RADIUS = 6378137.0
TILE_SIZE = 256
TOKEN_ENV = "UMPE_TILE_TOKEN"


class IngestError(ValueError):
    pass


class MissingTile(KeyError):
    pass


# --------------------------------------------------------------------------
# data carriers


@dataclass
class PolylineSet:
    source: str
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, K.POINTS_PER_POLYLINE, 2)))
    categories: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ids: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, K.POINTS_PER_POLYLINE, 2)
        self.categories = np.asarray(self.categories, dtype=np.int64).reshape(-1)
        n = len(self.points)
        if len(self.categories) != n:
            raise IngestError("one category per polyline required")
        if not self.ids:
            self.ids = list(range(n))
        if not self.degenerate:
            self.degenerate = [False] * n

    def __len__(self) -> int:
        return len(self.points)

    def one_hot(self, num_cats: int = K.NUM_SD_CLASSES) -> np.ndarray:
        return np.eye(num_cats)[self.categories]


@dataclass
class RasterPrior:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    source: str
    mpp_x: float
    mpp_y: float

    @classmethod
    def blank(cls, source: str, grid: BEVGridSpec) -> "RasterPrior":
        return cls(np.zeros((grid.height, grid.width, 3)), source, grid.mpp_x, grid.mpp_y)


@dataclass
class EgoPose:
    lon: float
    lat: float
    yaw: float
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        if not -MERCATOR_MAX_LAT <= self.lat <= MERCATOR_MAX_LAT:
            raise IngestError(f"latitude {self.lat} outside Web-Mercator range")


@dataclass
class PriorBundle:
    frame_id: str
    hd: PolylineSet
    sd: PolylineSet
    sat: RasterPrior
    rsd: RasterPrior
    presence: dict
    drift: dict = field(default_factory=dict)
    ego: EgoPose | None = None
    gt: dict | None = None  # class name -> list of (N, 2) arrays, synthetic frames
    obs: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    def presence_vector(self) -> np.ndarray:
        return np.array([float(self.presence[s]) for s in K.ALL_SOURCES])


# --------------------------------------------------------------------------
# tiles


@dataclass(frozen=True)
class TileRef:
    z: int
    x: int
    y: int

    def __post_init__(self):
        n = 2 ** self.z
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise IngestError(f"tile {self} outside the zoom-{self.z} grid")


def _check_lat(lat: float) -> None:
    if not (math.isfinite(lat) and -MERCATOR_MAX_LAT <= lat <= MERCATOR_MAX_LAT):
        raise IngestError(f"latitude {lat} outside Web-Mercator range")


def lonlat_to_world_px(lon: float, lat: float, z: int, tile_size: int = TILE_SIZE) -> tuple[float, float]:
    """Continuous global pixel coordinates at zoom ``z``."""
    _check_lat(lat)
    phi = math.radians(lat)
    n = 2 ** z * tile_size
    x = (lon + 180.0) / 360.0 * n
    y = (1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * n
    return x, y


def lonlat_to_tile(lon: float, lat: float, z: int) -> TileRef:
    x, y = lonlat_to_world_px(lon, lat, z, tile_size=1)
    n = 2 ** z
    return TileRef(z, min(max(int(math.floor(x)), 0), n - 1), min(max(int(math.floor(y)), 0), n - 1))


def tile_center_lonlat(t: TileRef) -> tuple[float, float]:
    n = 2 ** t.z
    lon = (t.x + 0.5) / n * 360.0 - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1 - 2 * (t.y + 0.5) / n))))
    return lon, lat


def ground_resolution(lat: float, z: int, tile_size: int = TILE_SIZE) -> float:
    """Metres per tile pixel at latitude ``lat``."""
    return 2 * math.pi * EARTH_RADIUS * math.cos(math.radians(lat)) / (tile_size * 2 ** z)


def choose_zoom(lat: float, mpp: float, tile_size: int = TILE_SIZE, max_zoom: int = 22) -> int:
    """Smallest zoom whose ground resolution does not exceed ``mpp``."""
    for z in range(max_zoom + 1):
        if ground_resolution(lat, z, tile_size) <= mpp:
            return z
    return max_zoom


class TileClient(Protocol):
    tile_size: int

    def get(self, z: int, x: int, y: int) -> np.ndarray: ...


class FixtureTileClient:
    """Plays back tiles stored as ``root/z/x/y.png``."""

    def __init__(self, root: str | Path, tile_size: int = TILE_SIZE):
        self.root = Path(root)
        self.tile_size = tile_size

    def get(self, z: int, x: int, y: int) -> np.ndarray:
        path = self.root / str(z) / str(x) / f"{y}.png"
        if not path.exists():
            raise MissingTile((z, x, y))
        return np.asarray(Image.open(path).convert("RGB"))


class LiveTileClient:
    """HTTP tile client; the access token comes from ``UMPE_TILE_TOKEN``."""

    def __init__(self, url_template: str, tile_size: int = TILE_SIZE, retries: int = 3, timeout: float = 10.0):
        token = os.environ.get(TOKEN_ENV)
        if not token:
            raise IngestError(f"live tile mode needs an access token in ${TOKEN_ENV}")
        self.url_template, self.token = url_template, token
        self.tile_size, self.retries, self.timeout = tile_size, retries, timeout

    def get(self, z: int, x: int, y: int) -> np.ndarray:
        import urllib.error
        import urllib.request

        url = self.url_template.format(z=z, x=x, y=y, token=self.token)
        err: Exception | None = None
        for attempt in range(self.retries):
            try:
                with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                    return np.asarray(Image.open(io.BytesIO(resp.read())).convert("RGB"))
            except urllib.error.HTTPError as e:
                if e.code == 404:
                    raise MissingTile((z, x, y)) from e
                err = e
            except OSError as e:
                err = e
            time.sleep(0.5 * 2 ** attempt)
        raise ConnectionError(f"tile {z}/{x}/{y} failed after {self.retries} attempts") from err


@dataclass
class FetchResult:
    image: np.ndarray  # (H, W, 3) uint8
    zoom: int
    missing: list


def fetch_tiles(ego: EgoPose, z: int, client: TileClient, grid: BEVGridSpec,
                background=(0, 0, 0), max_workers: int = 4) -> FetchResult:
    """Stitch covering tiles, rotate by ego yaw, crop to the BEV canvas.

    Canvas pixels are sampled nearest-neighbour from the stitched mosaic, so
    results are bit-identical for a given tile set whatever order tiles
    arrive in.
    """
    ts = client.tile_size
    res = ground_resolution(ego.lat, z, ts)
    ex, ey = lonlat_to_world_px(ego.lon, ego.lat, z, ts)
    radius = math.hypot(grid.height * grid.mpp_x, grid.width * grid.mpp_y) / 2 / res + 2
    n = 2 ** z
    tx0, tx1 = int(math.floor((ex - radius) / ts)), int(math.floor((ex + radius) / ts))
    ty0, ty1 = int(math.floor((ey - radius) / ts)), int(math.floor((ey + radius) / ts))
    refs = [(tx, ty) for ty in range(ty0, ty1 + 1) for tx in range(tx0, tx1 + 1)]

    def load(ref):
        tx, ty = ref
        if not (0 <= ty < n):
            return ref, None
        try:
            return ref, client.get(z, tx % n, ty)
        except MissingTile:
            return ref, None

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        tiles = dict(pool.map(load, refs))
    mosaic = np.empty(((ty1 - ty0 + 1) * ts, (tx1 - tx0 + 1) * ts, 3), dtype=np.uint8)
    mosaic[:] = np.asarray(background, dtype=np.uint8)
    missing = []
    for (tx, ty) in refs:
        tile = tiles[(tx, ty)]
        if tile is None:
            missing.append((z, tx % n, ty))
            continue
        r0, c0 = (ty - ty0) * ts, (tx - tx0) * ts
        mosaic[r0:r0 + ts, c0:c0 + ts] = tile[:ts, :ts, :3]
    image = sample_rotated(mosaic, ex - tx0 * ts, ey - ty0 * ts, ego.yaw, res, grid, background)
    return FetchResult(image, z, missing)


def sample_rotated(mosaic: np.ndarray, ex: float, ey: float, yaw: float, res: float,
                   grid: BEVGridSpec, background=(0, 0, 0)) -> np.ndarray:
    """Nearest-neighbour sample of a north-up mosaic into the ego canvas.

    (ex, ey) is the ego position in mosaic pixels; yaw is the heading
    counter-clockwise from east.
    """
    rows, cols = np.meshgrid(np.arange(grid.height), np.arange(grid.width), indexing="ij")
    ego_xy = grid.pixel_to_ego(np.stack([rows, cols], -1))
    c, s = math.cos(yaw), math.sin(yaw)
    east = c * ego_xy[..., 0] - s * ego_xy[..., 1]
    north = s * ego_xy[..., 0] + c * ego_xy[..., 1]
    px = np.floor(ex + east / res).astype(np.int64)
    py = np.floor(ey - north / res).astype(np.int64)
    ok = (px >= 0) & (px < mosaic.shape[1]) & (py >= 0) & (py < mosaic.shape[0])
    out = np.empty((grid.height, grid.width, 3), dtype=np.uint8)
    out[:] = np.asarray(background, dtype=np.uint8)
    out[ok] = mosaic[py[ok], px[ok]]
    return out


# --------------------------------------------------------------------------
# projection and crop


def lonlat_to_local(lon, lat, lon0: float, lat0: float) -> np.ndarray:
    """Equirectangular local east/north metres about (lon0, lat0)."""
    lon, lat = np.asarray(lon, dtype=np.float64), np.asarray(lat, dtype=np.float64)
    east = np.radians(lon - lon0) * EARTH_RADIUS * math.cos(math.radians(lat0))
    north = np.radians(lat - lat0) * EARTH_RADIUS
    return np.stack([east, north], -1)


def world_to_ego(pts: np.ndarray, ego: EgoPose) -> np.ndarray:
    """Inverse ego transform: translate by -position, rotate by -yaw."""
    pts = np.asarray(pts, dtype=np.float64) - np.array([ego.x, ego.y])
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    return np.stack([c * pts[:, 0] + s * pts[:, 1], -s * pts[:, 0] + c * pts[:, 1]], -1)


def crop_polylines(polylines, categories, ids=None, num_points: int = K.POINTS_PER_POLYLINE):
    """Clip ego-frame polylines to the window and resample the pieces."""
    out_pts, out_cat, out_ids, degen = [], [], [], []
    ids = ids if ids is not None else list(range(len(polylines)))
    for pl, cat, pid in zip(polylines, categories, ids):
        pieces = clip_polyline(pl, -K.X_HALF, K.X_HALF, -K.Y_HALF, K.Y_HALF)
        for j, piece in enumerate(pieces):
            r = resample_polyline(piece, num_points)
            out_pts.append(r.points)
            out_cat.append(int(cat))
            out_ids.append(f"{pid}" if len(pieces) == 1 else f"{pid}.{j}")
            degen.append(r.degenerate)
    return out_pts, out_cat, out_ids, degen


def crop_ego_window(polylines, categories, ego: EgoPose, source: str = "sd",
                    ids=None) -> PolylineSet:
    """Local-frame polylines -> ego-frame, clipped, resampled PolylineSet."""
    ego_lines = [world_to_ego(pl, ego) for pl in polylines]
    pts, cats, out_ids, degen = crop_polylines(ego_lines, categories, ids)
    if not pts:
        return PolylineSet(source)
    return PolylineSet(source, np.stack(pts), np.array(cats), out_ids, degen)


# --------------------------------------------------------------------------
# rasterization

# Fixed RGB palette, one colour per SD class, listed in overdraw order.
SD_PALETTE = {
    "motorway": (230, 57, 70),
    "trunk": (244, 162, 97),
    "primary": (233, 196, 106),
    "secondary": (42, 157, 143),
    "tertiary": (38, 70, 83),
    "residential": (131, 56, 236),
    "service": (58, 134, 255),
    "unclassified": (255, 0, 110),
}
SD_BACKGROUND = (0, 0, 0)


def palette_array(palette: dict = SD_PALETTE) -> np.ndarray:
    return np.array([palette[c] for c in K.SD_CLASSES], dtype=np.uint8)


def bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer line from (r0, c0) to (r1, c1), endpoints included."""
    pts = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if r == r1 and c == c1:
            return pts
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def stroke_mask(polyline: np.ndarray, grid: BEVGridSpec, stroke_px: int = 1) -> np.ndarray:
    """Boolean (H, W) mask of a polyline drawn with a square brush."""
    mask = np.zeros((grid.height, grid.width), dtype=bool)
    rc = np.rint(grid.ego_to_pixel(polyline)).astype(np.int64)
    lo, hi = -((stroke_px - 1) // 2), stroke_px // 2
    cells = set()
    for (r0, c0), (r1, c1) in zip(rc[:-1], rc[1:]):
        cells.update(bresenham(int(r0), int(c0), int(r1), int(c1)))
    if len(rc) == 1:
        cells.add((int(rc[0, 0]), int(rc[0, 1])))
    for r, c in cells:
        r_lo, r_hi = max(r + lo, 0), min(r + hi + 1, grid.height)
        c_lo, c_hi = max(c + lo, 0), min(c + hi + 1, grid.width)
        if r_lo < r_hi and c_lo < c_hi:
            mask[r_lo:r_hi, c_lo:c_hi] = True
    return mask


def rasterize_sd(sd: PolylineSet, grid: BEVGridSpec, palette: dict = SD_PALETTE,
                 stroke_px: int = 1, background=SD_BACKGROUND) -> RasterPrior:
    """Stroke each SD polyline in its class colour; later classes overdraw earlier ones."""
    colors = palette_array(palette)
    img = np.empty((grid.height, grid.width, 3), dtype=np.uint8)
    img[:] = np.asarray(background, dtype=np.uint8)
    order = np.argsort(sd.categories, kind="stable")
    for i in order:
        img[stroke_mask(sd.points[i], grid, stroke_px)] = colors[sd.categories[i]]
    return RasterPrior(img.astype(np.float64) / 255.0, "rsd", grid.mpp_x, grid.mpp_y)


# --------------------------------------------------------------------------
# bundle IO


def _png_bytes(img: np.ndarray) -> bytes:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _read_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB")).astype(np.float64) / 255.0


def _polylines_jsonl(ps: PolylineSet) -> str:
    lines = []
    for pid, cat, pts, deg in zip(ps.ids, ps.categories, ps.points, ps.degenerate):
        rec = {"id": pid, "category": int(cat), "points": pts.tolist(), "source": ps.source}
        if deg:
            rec["degenerate"] = True
        lines.append(json.dumps(rec))
    return "".join(line + "\n" for line in lines)


def _read_polylines(path: Path, source: str) -> PolylineSet:
    recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not recs:
        return PolylineSet(source)
    return PolylineSet(source, np.array([r["points"] for r in recs]), np.array([r["category"] for r in recs]),
                       [r["id"] for r in recs], [bool(r.get("degenerate", False)) for r in recs])


def write_bundle(root: str | Path, b: PriorBundle) -> Path:
    d = Path(root)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "frame_id": b.frame_id,
        "presence": {s: int(b.presence[s]) for s in K.ALL_SOURCES},
        "mpp": [b.sat.mpp_x, b.sat.mpp_y],
        "drift": {k: v.to_dict() for k, v in b.drift.items()},
        "ego": None if b.ego is None else {"lon": b.ego.lon, "lat": b.ego.lat, "yaw": b.ego.yaw,
                                            "x": b.ego.x, "y": b.ego.y},
        "flags": b.flags,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    (d / "hd.jsonl").write_text(_polylines_jsonl(b.hd))
    (d / "sd.jsonl").write_text(_polylines_jsonl(b.sd))
    (d / "sat.png").write_bytes(_png_bytes(b.sat.image))
    (d / "sd_raster.png").write_bytes(_png_bytes(b.rsd.image))
    if b.gt is not None:
        lines = [json.dumps({"class": cls, "points": np.asarray(pl).tolist()})
                 for cls in K.MAP_CLASSES for pl in b.gt.get(cls, [])]
        (d / "gt.jsonl").write_text("".join(line + "\n" for line in lines))
    if b.obs is not None:
        np.save(d / "obs.npy", np.ascontiguousarray(b.obs, dtype=np.float32), allow_pickle=False)
    return d


def read_bundle(root: str | Path) -> PriorBundle:
    d = Path(root)
    meta = json.loads((d / "meta.json").read_text())
    mpp_x, mpp_y = meta["mpp"]
    sat = RasterPrior(_read_png(d / "sat.png"), "sat", mpp_x, mpp_y)
    rsd = RasterPrior(_read_png(d / "sd_raster.png"), "rsd", mpp_x, mpp_y)
    gt = None
    if (d / "gt.jsonl").exists():
        gt = {c: [] for c in K.MAP_CLASSES}
        for line in (d / "gt.jsonl").read_text().splitlines():
            rec = json.loads(line)
            gt[rec["class"]].append(np.array(rec["points"], dtype=np.float64))
    obs = np.load(d / "obs.npy") if (d / "obs.npy").exists() else None
    ego = EgoPose(**meta["ego"]) if meta.get("ego") else None
    return PriorBundle(
        frame_id=meta["frame_id"],
        hd=_read_polylines(d / "hd.jsonl", "hd"),
        sd=_read_polylines(d / "sd.jsonl", "sd"),
        sat=sat, rsd=rsd,
        presence={s: int(v) for s, v in meta["presence"].items()},
        drift={k: Pose2(**v) for k, v in meta["drift"].items()},
        ego=ego, gt=gt, obs=obs, flags=meta.get("flags", {}),
    )


# --------------------------------------------------------------------------
# fixture ingestion


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def ingest_fixtures(src: str | Path, out: str | Path, grid: BEVGridSpec | None = None,
                    client: TileClient | None = None, stroke_px: int = 1) -> list[Path]:
    """Turn a fixture directory into bundle directories.

    Fixture layout: ``frames.jsonl`` (frame_id, lon, lat, yaw, x, y),
    ``sd_polylines.jsonl`` / ``hd_polylines.jsonl`` (id, category, points in
    local metres) and ``tiles/z/x/y.png``.
    """
    src, out = Path(src), Path(out)
    grid = grid or BEVGridSpec()
    client = client or FixtureTileClient(src / "tiles")
    frames = _read_jsonl(src / "frames.jsonl")
    if not frames:
        raise IngestError(f"no frames in {src / 'frames.jsonl'}")
    written = []
    lines = {s: _read_jsonl(src / f"{s}_polylines.jsonl") for s in ("hd", "sd")}
    for fr in frames:
        ego = EgoPose(fr["lon"], fr["lat"], fr["yaw"], fr.get("x", 0.0), fr.get("y", 0.0))
        sets = {}
        for s in ("hd", "sd"):
            recs = lines[s]
            sets[s] = crop_ego_window([np.array(r["points"], dtype=np.float64) for r in recs],
                                      [r.get("category", 0) for r in recs], ego, s, [r["id"] for r in recs])
        rsd = rasterize_sd(sets["sd"], grid, stroke_px=stroke_px)
        z = choose_zoom(ego.lat, min(grid.mpp_x, grid.mpp_y), client.tile_size)
        fetched = fetch_tiles(ego, z, client, grid)
        sat = RasterPrior(fetched.image.astype(np.float64) / 255.0, "sat", grid.mpp_x, grid.mpp_y)
        presence = {"hd": int(bool(lines["hd"])), "sd": int(bool(lines["sd"])),
                    "sat": int(len(fetched.missing) == 0 or bool(fetched.image.any())),
                    "rsd": int(bool(lines["sd"]))}
        flags = {"zoom": z}
        if fetched.missing:
            flags["missing_tiles"] = [list(m) for m in fetched.missing]
        bundle = PriorBundle(str(fr["frame_id"]), sets["hd"], sets["sd"], sat, rsd, presence,
                             ego=ego, flags=flags)
        written.append(write_bundle(out / str(fr["frame_id"]), bundle))
    return written
