"""Procedural desk-scale worlds and the four priors derived from them."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from umpe import constants as K
from umpe.geometry import BEVGridSpec, Pose2, clip_polyline, se2_apply
from umpe.ingest import (PolylineSet, PriorBundle, RasterPrior, crop_polylines, rasterize_sd,
                         stroke_mask, write_bundle)

LANE_WIDTH = 3.5
CROSSING_DEPTH = 3.0
MAX_DRIFT_T = 2.0
MAX_DRIFT_R = math.radians(5.0)

# SD class index by lane count of the main road; cross roads are "tertiary".
_MAIN_SD_CLASS = {1: 5, 2: 3, 3: 2}
_CROSS_SD_CLASS = 4


@dataclass
class WorldSpec:
    max_lanes: int = 3
    intersection_prob: float = 0.4
    max_crossings: int = 3
    max_heading_deg: float = 12.0
    max_curvature: float = 0.004


@dataclass
class NoiseSpec:
    drift_scale: float = 0.5  # fraction of the (2 m, 5 deg) bound
    hd_decimation: float = 0.0
    sd_coarsen: int = 3
    sd_smooth: int = 2
    sat_blur: float = 0.7
    sat_occlusion: float = 0.15
    sat_texture: float = 0.08
    obs_noise: float = 0.35
    obs_occlusion: float = 0.35
    obs_blur: float = 0.6
    obs_range: float = 14.0  # visibility falloff scale in metres; 0 disables
    presence_prob: float = 1.0
    gt_stroke_px: int = 2
    rsd_stroke_px: int = 2

    def __post_init__(self):
        for name in ("drift_scale", "hd_decimation", "sat_occlusion", "obs_occlusion", "presence_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} must lie in [0, 1]")
        for name in ("sat_blur", "sat_texture", "obs_noise", "obs_blur", "obs_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def clean(cls) -> "NoiseSpec":
        return cls(drift_scale=0.0, hd_decimation=0.0, sd_coarsen=1, sd_smooth=0, sat_blur=0.0,
                   sat_occlusion=0.0, sat_texture=0.0, obs_noise=0.0, obs_occlusion=0.0,
                   obs_blur=0.0, obs_range=0.0)


@dataclass
class WorldMap:
    elements: dict  # class -> list of (N, 2) arrays
    roads: list  # (centerline (N, 2), half_width, sd_class)
    seed: int
    extent: tuple = (K.X_EXTENT, K.Y_EXTENT)


def _offset_curve(center: np.ndarray, offset: float) -> np.ndarray:
    tang = np.gradient(center, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.stack([-tang[:, 1], tang[:, 0]], -1)
    return center + offset * normal


def _clip_all(lines, out: list) -> None:
    for pl in lines:
        out.extend(clip_polyline(pl, -K.X_HALF, K.X_HALF, -K.Y_HALF, K.Y_HALF))


def gen_world(seed: int, layout: WorldSpec | None = None) -> WorldMap:
    """One road spine with 1-3 lanes, optional cross road, 0-N ped crossings."""
    layout = layout or WorldSpec()
    rng = np.random.default_rng(seed)
    n_lanes = int(rng.integers(1, layout.max_lanes + 1))
    hw = n_lanes * LANE_WIDTH / 2
    y0 = rng.uniform(-4.0, 4.0)
    heading = math.radians(rng.uniform(-layout.max_heading_deg, layout.max_heading_deg))
    kappa = rng.uniform(-layout.max_curvature, layout.max_curvature)
    xs = np.arange(-45.0, 45.0 + 1e-9, 0.5)
    spine = np.stack([xs, y0 + math.tan(heading) * xs + kappa * xs ** 2], -1)

    has_cross = rng.uniform() < layout.intersection_prob
    xc = rng.uniform(-15.0, 15.0) if has_cross else None
    hw2 = int(rng.integers(1, 3)) * LANE_WIDTH / 2 if has_cross else 0.0

    def gap(line):
        # cut the main road's boundaries where the cross road passes
        if xc is None:
            return [line]
        keep = np.abs(line[:, 0] - xc) > hw2
        pieces, cur = [], []
        for p, k in zip(line, keep):
            if k:
                cur.append(p)
            elif cur:
                pieces.append(np.array(cur))
                cur = []
        if cur:
            pieces.append(np.array(cur))
        return [p for p in pieces if len(p) >= 2]

    boundaries, dividers, crossings = [], [], []
    for side in (-1, 1):
        _clip_all(gap(_offset_curve(spine, side * hw)), boundaries)
    for i in range(1, n_lanes):
        _clip_all([_offset_curve(spine, -hw + i * LANE_WIDTH)], dividers)

    roads = [(spine, hw, _MAIN_SD_CLASS[n_lanes])]
    if xc is not None:
        yc = float(np.interp(xc, spine[:, 0], spine[:, 1]))
        ys = np.arange(-25.0, 25.0 + 1e-9, 0.5)
        cross = np.stack([np.full_like(ys, xc), ys], -1)
        roads.append((cross, hw2, _CROSS_SD_CLASS))
        for side in (-1, 1):
            for sgn in (-1, 1):
                part = ys[sgn * (ys - yc) > hw]
                if len(part) >= 2:
                    line = np.stack([np.full_like(part, xc + side * hw2), part], -1)
                    _clip_all([line], boundaries)

    n_cross = int(rng.integers(0, layout.max_crossings + 1))
    for _ in range(n_cross):
        xp = rng.uniform(-25.0, 25.0)
        if xc is not None and abs(xp - xc) < hw2 + CROSSING_DEPTH:
            continue
        i = int(np.argmin(np.abs(spine[:, 0] - xp)))
        c = spine[i]
        t = spine[min(i + 1, len(spine) - 1)] - spine[max(i - 1, 0)]
        t /= np.linalg.norm(t)
        nrm = np.array([-t[1], t[0]])
        d = CROSSING_DEPTH / 2
        poly = np.array([c - d * t - hw * nrm, c + d * t - hw * nrm, c + d * t + hw * nrm,
                         c - d * t + hw * nrm, c - d * t - hw * nrm])
        _clip_all([poly], crossings)

    elements = {"ped_crossing": crossings, "divider": dividers, "boundary": boundaries}
    return WorldMap(elements, roads, seed)


def sample_drift(rng: np.random.Generator, scale: float) -> Pose2:
    if scale == 0:
        return Pose2()
    return Pose2(rng.uniform(-1, 1) * MAX_DRIFT_T * scale, rng.uniform(-1, 1) * MAX_DRIFT_T * scale,
                 rng.uniform(-1, 1) * MAX_DRIFT_R * scale)


def _coarsen(pl: np.ndarray, step: int, smooth: int) -> np.ndarray:
    if step > 1:
        idx = np.unique(np.r_[np.arange(0, len(pl), step), len(pl) - 1])
        pl = pl[idx]
    if smooth > 0 and len(pl) > 2:
        k = 2 * smooth + 1
        padded = np.concatenate([np.repeat(pl[:1], smooth, 0), pl, np.repeat(pl[-1:], smooth, 0)])
        kern = np.ones(k) / k
        sm = np.stack([np.convolve(padded[:, j], kern, mode="valid") for j in range(2)], -1)
        sm[0], sm[-1] = pl[0], pl[-1]
        pl = sm
    return pl


def _polyline_set(source: str, lines, cats) -> PolylineSet:
    pts, cat, ids, degen = crop_polylines(lines, cats)
    if not pts:
        return PolylineSet(source)
    return PolylineSet(source, np.stack(pts), np.array(cat), ids, degen)


def gt_class_maps(world, grid: BEVGridSpec, stroke_px: int = 2) -> np.ndarray:
    """(3, H, W) binary rasters in MAP_CLASSES order from a WorldMap or its elements dict."""
    elements = world.elements if isinstance(world, WorldMap) else world
    maps = np.zeros((K.NUM_MAP_CLASSES, grid.height, grid.width), dtype=np.float32)
    for ci, cls in enumerate(K.MAP_CLASSES):
        for pl in elements[cls]:
            maps[ci][stroke_mask(pl, grid, stroke_px)] = 1.0
    return maps


def _road_mask(roads, drift: Pose2, grid: BEVGridSpec) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(grid.height), np.arange(grid.width), indexing="ij")
    xy = grid.pixel_to_ego(np.stack([rows, cols], -1)).reshape(-1, 2)
    mask = np.zeros(len(xy), dtype=bool)
    for center, hw, _ in roads:
        c = se2_apply(drift, center)
        a, b = c[:-1], c[1:]
        ab = b - a
        t = np.clip(((xy[:, None, :] - a) * ab).sum(-1) / (ab * ab).sum(-1), 0, 1)
        d = np.linalg.norm(xy[:, None, :] - (a + t[..., None] * ab), axis=-1).min(1)
        mask |= d <= hw
    return mask.reshape(grid.height, grid.width)


def _occlusion_mask(rng, grid: BEVGridSpec, rate: float, max_side: int = 12) -> np.ndarray:
    """Random rectangles added until their union covers ``rate`` of the canvas."""
    occ = np.zeros((grid.height, grid.width), dtype=bool)
    if rate <= 0:
        return occ
    target = rate * occ.size
    for _ in range(1000):
        if occ.sum() >= target:
            break
        h, w = int(rng.integers(3, max_side + 1)), int(rng.integers(3, max_side + 1))
        r, c = int(rng.integers(0, grid.height)), int(rng.integers(0, grid.width))
        occ[r:r + h, c:c + w] = True
    return occ


def render_satellite(world: WorldMap, drift: Pose2, noise: NoiseSpec, rng, grid: BEVGridSpec) -> np.ndarray:
    """Procedural top-down image of the drifted world, (H, W, 3) in [0, 1] quantized to 1/255."""
    h, w = grid.height, grid.width
    img = np.empty((h, w, 3))
    img[:] = (0.30, 0.45, 0.25)
    if noise.sat_texture > 0:
        tex = gaussian_filter(rng.normal(0, 1, (h, w)), 1.5)
        img += noise.sat_texture * tex[..., None] / max(tex.std(), 1e-9)
    img[_road_mask(world.roads, drift, grid)] = (0.35, 0.35, 0.37)
    colors = {"boundary": (0.75, 0.75, 0.70), "divider": (0.95, 0.95, 0.95), "ped_crossing": (1.0, 1.0, 0.85)}
    for cls in ("boundary", "divider", "ped_crossing"):
        for pl in world.elements[cls]:
            img[stroke_mask(se2_apply(drift, pl), grid, 1)] = colors[cls]
    if noise.sat_blur > 0:
        img = gaussian_filter(img, (noise.sat_blur, noise.sat_blur, 0))
    occ = _occlusion_mask(rng, grid, noise.sat_occlusion, max_side=6)
    img[occ] = (0.12, 0.30, 0.10)
    return np.round(np.clip(img, 0, 1) * 255) / 255


def derive_priors(world: WorldMap, noise: NoiseSpec, rng: np.random.Generator,
                  grid: BEVGridSpec | None = None, frame_id: str = "0") -> PriorBundle:
    grid = grid or BEVGridSpec()
    drift = {s: sample_drift(rng, noise.drift_scale) for s in K.ALL_SOURCES}

    hd_lines = []
    for pl in world.elements["boundary"]:
        if noise.hd_decimation > 0 and rng.uniform() < noise.hd_decimation:
            continue
        hd_lines.append(se2_apply(drift["hd"], pl))
    hd = _polyline_set("hd", hd_lines, [0] * len(hd_lines))

    sd_lines, sd_cats = [], []
    for center, _, cls in world.roads:
        sd_lines.append(se2_apply(drift["sd"], _coarsen(center, noise.sd_coarsen, noise.sd_smooth)))
        sd_cats.append(cls)
    sd = _polyline_set("sd", sd_lines, sd_cats)

    rsd = rasterize_sd(sd, grid, stroke_px=noise.rsd_stroke_px)
    sat = RasterPrior(render_satellite(world, drift["sat"], noise, rng, grid), "sat", grid.mpp_x, grid.mpp_y)
    presence = {s: int(rng.uniform() < noise.presence_prob) for s in K.ALL_SOURCES}
    # an absent source ships an empty payload; dropout later only clears the bit
    if not presence["hd"]:
        hd = PolylineSet("hd")
    if not presence["sd"]:
        sd = PolylineSet("sd")
    if not presence["sat"]:
        sat = RasterPrior.blank("sat", grid)
    if not presence["rsd"]:
        rsd = RasterPrior.blank("rsd", grid)
    return PriorBundle(frame_id, hd, sd, sat, rsd, presence, drift=drift,
                       gt={c: list(v) for c, v in world.elements.items()})


def source_dropout(bundle, rng: np.random.Generator, p: float = 0.3):
    """Per family, with probability p mask one of its two sources (chosen uniformly).

    Accepts a presence dict or a PriorBundle and returns the same kind; the
    payload of a dropped source is kept, only its presence bit is cleared.
    """
    presence = bundle.presence if isinstance(bundle, PriorBundle) else bundle
    out = dict(presence)
    for fam in (K.VECTOR_SOURCES, K.RASTER_SOURCES):
        if rng.uniform() < p:
            out[fam[int(rng.integers(0, 2))]] = 0
    if isinstance(bundle, PriorBundle):
        return replace(bundle, presence=out)
    return out


def render_bev_observation(world: WorldMap, noise: NoiseSpec, rng: np.random.Generator,
                           grid: BEVGridSpec | None = None) -> np.ndarray:
    """Corrupted class rasters standing in for a camera BEV feature, (3, H, W)."""
    grid = grid or BEVGridSpec()
    obs = gt_class_maps(world, grid, noise.gt_stroke_px).astype(np.float64)
    if noise.obs_range > 0:
        rows = np.arange(grid.height)
        x = grid.pixel_to_ego(np.stack([rows, np.zeros_like(rows)], -1))[:, 0]
        vis = np.exp(-(np.abs(x) / noise.obs_range) ** 2)
        obs *= vis[None, :, None]
    occ = _occlusion_mask(rng, grid, noise.obs_occlusion)
    obs[:, occ] = 0.0
    if noise.obs_blur > 0:
        obs = gaussian_filter(obs, (0, noise.obs_blur, noise.obs_blur))
    if noise.obs_noise > 0:
        obs = obs + rng.normal(0, noise.obs_noise, obs.shape)
    return obs.astype(np.float32)


def frame_rng(dataset_seed: int, frame_idx: int) -> np.random.Generator:
    return np.random.default_rng([dataset_seed, frame_idx])


def synth_frame(dataset_seed: int, idx: int, noise: NoiseSpec, world_spec: WorldSpec | None = None,
                grid: BEVGridSpec | None = None) -> PriorBundle:
    grid = grid or BEVGridSpec()
    rng = frame_rng(dataset_seed, idx)
    world = gen_world(int(rng.integers(0, 2 ** 31 - 1)), world_spec)
    bundle = derive_priors(world, noise, rng, grid, frame_id=f"{idx:06d}")
    bundle.obs = render_bev_observation(world, noise, rng, grid)
    return bundle


def synth_dataset(out: str | Path, seed: int, frames: int, noise: NoiseSpec | None = None,
                  world_spec: WorldSpec | None = None, grid: BEVGridSpec | None = None) -> list[Path]:
    noise = noise or NoiseSpec()
    out = Path(out)
    paths = []
    for i in range(frames):
        paths.append(write_bundle(out / f"{i:06d}", synth_frame(seed, i, noise, world_spec, grid)))
    return paths


def noise_dict(noise: NoiseSpec) -> dict:
    return asdict(noise)
