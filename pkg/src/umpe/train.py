"""Two-stage curriculum training, loss assembly, evaluation and powerset sweeps."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor, nn

from umpe import constants as K
from umpe.config import TrainConfig
from umpe.fusion import AlphaSchedule, PriorTensors, UMPE, UMPEConfig, alpha_at
from umpe.geometry import BEVGridSpec, resample_polyline
from umpe.head import BEVStem, MapDecoder, MapPrediction, raster_bce
from umpe.ingest import PriorBundle, read_bundle
from umpe.metrics import Instance, IoUAccumulator, evaluate_ap
from umpe.raster_encoder import RasterConfig
from umpe.synth import gt_class_maps, source_dropout
from umpe.vector_encoder import PolylineBatch, VectorConfig

log = logging.getLogger(__name__)

SUBSET_NAMES = K.ALL_SOURCES


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data


@dataclass
class FrameSet:
    """All frames of a dataset held as arrays."""

    frame_ids: list
    obs: np.ndarray  # (N, 3, H, W) float32
    gt: np.ndarray  # (N, 3, H, W) float32
    sat: np.ndarray  # (N, 3, H, W) float32
    rsd: np.ndarray
    hd: list  # per frame (n, P, 2), cats (n,)
    sd: list
    presence: np.ndarray  # (N, 4)
    gt_instances: list  # per frame list[Instance]

    def __len__(self) -> int:
        return len(self.frame_ids)


def gt_instances(gt: dict) -> list[Instance]:
    out = []
    for ci, cls in enumerate(K.MAP_CLASSES):
        for pl in gt.get(cls, []):
            out.append(Instance(ci, resample_polyline(pl).points, 1.0, len(out)))
    return out


def load_frames(data_dir: str | Path, grid: BEVGridSpec | None = None, gt_stroke_px: int = 2) -> FrameSet:
    grid = grid or BEVGridSpec()
    dirs = sorted(p for p in Path(data_dir).iterdir() if (p / "meta.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no bundles under {data_dir}")
    bundles = [read_bundle(d) for d in dirs]
    return frames_from_bundles(bundles, grid, gt_stroke_px)


def frames_from_bundles(bundles: list[PriorBundle], grid: BEVGridSpec, gt_stroke_px: int = 2) -> FrameSet:
    def chw(img):
        return np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1))

    obs, gts, sat, rsd, hd, sd, pres, inst = [], [], [], [], [], [], [], []
    for b in bundles:
        if b.obs is None or b.gt is None:
            raise ValueError(f"frame {b.frame_id} lacks observation or ground truth")
        obs.append(b.obs.astype(np.float32))
        gts.append(gt_class_maps(b.gt, grid, gt_stroke_px))
        sat.append(chw(b.sat.image))
        rsd.append(chw(b.rsd.image))
        hd.append((b.hd.points.astype(np.float32), b.hd.categories))
        sd.append((b.sd.points.astype(np.float32), b.sd.categories))
        pres.append(b.presence_vector())
        inst.append(gt_instances(b.gt))
    return FrameSet([b.frame_id for b in bundles], np.stack(obs), np.stack(gts), np.stack(sat),
                    np.stack(rsd), hd, sd, np.stack(pres).astype(np.float32), inst)


def _pad_polylines(items, dtype) -> PolylineBatch:
    n_max = max((len(p) for p, _ in items), default=0)
    b = len(items)
    pts = torch.zeros(b, n_max, K.POINTS_PER_POLYLINE, 2, dtype=dtype)
    cats = torch.zeros(b, n_max, dtype=torch.long)
    mask = torch.zeros(b, n_max, dtype=torch.bool)
    for i, (p, c) in enumerate(items):
        n = len(p)
        if n:
            pts[i, :n] = torch.from_numpy(np.asarray(p)).to(dtype)
            cats[i, :n] = torch.from_numpy(np.asarray(c))
            mask[i, :n] = True
    return PolylineBatch(pts, cats, mask)


@dataclass
class Batch:
    obs: Tensor
    gt: Tensor
    priors: PriorTensors
    index: np.ndarray


def make_batch(fs: FrameSet, idx, presence: np.ndarray | None = None, dtype=torch.float32) -> Batch:
    """Collate frames; absent sources are zeroed here, before any encoder sees them."""
    idx = np.asarray(idx)
    pres = fs.presence[idx] if presence is None else presence
    pres_t = torch.from_numpy(np.asarray(pres, dtype=np.float64)).to(dtype)
    hd = _pad_polylines([fs.hd[i] for i in idx], dtype)
    sd = _pad_polylines([fs.sd[i] for i in idx], dtype)
    hd = _zero_absent(hd, pres_t[:, 0] > 0)
    sd = _zero_absent(sd, pres_t[:, 1] > 0)
    sat = _zero_images(torch.from_numpy(fs.sat[idx]).to(dtype), pres_t[:, 2] > 0)
    rsd = _zero_images(torch.from_numpy(fs.rsd[idx]).to(dtype), pres_t[:, 3] > 0)
    priors = PriorTensors(hd, sd, sat, rsd, pres_t)
    return Batch(torch.from_numpy(fs.obs[idx]).to(dtype), torch.from_numpy(fs.gt[idx]).to(dtype), priors, idx)


def _zero_images(img: Tensor, present: Tensor) -> Tensor:
    return torch.where(present[:, None, None, None], img, torch.zeros_like(img))


def _zero_absent(pl: PolylineBatch, present: Tensor) -> PolylineBatch:
    mask = pl.mask & present[:, None]
    pts = torch.where(mask[..., None, None], pl.points, torch.zeros_like(pl.points))
    return PolylineBatch(pts, pl.cats * mask, mask)


# --------------------------------------------------------------------------
# model


class MapModel(nn.Module):
    """Observation stem -> prior encoder -> mapping head."""

    def __init__(self, cfg: TrainConfig, grid: BEVGridSpec | None = None):
        super().__init__()
        self.cfg = cfg
        self.grid = grid or BEVGridSpec()
        ucfg = UMPEConfig(
            width=cfg.width, order=cfg.fusion_order, learnable_alpha=cfg.learnable_alpha,
            vector=VectorConfig(num_layers=cfg.num_layers, num_heads=cfg.num_heads, share_kv=cfg.share_kv,
                                residual=cfg.vector_residual, query_pos=cfg.query_pos, lambda_t=cfg.lambda_t, lambda_r=cfg.lambda_r),
            raster=RasterConfig(resnet18=cfg.resnet18, per_source_film=cfg.per_source_film,
                                gate_mode=cfg.gate_mode, align=cfg.raster_align,
                                lambda_t=cfg.lambda_t, lambda_r=cfg.lambda_r),
        )
        self.stem = BEVStem(K.NUM_MAP_CLASSES, cfg.width)
        self.umpe = UMPE(ucfg, self.grid)
        self.decoder = MapDecoder(cfg.width, self.grid, vector_head=cfg.vector_head)

    def forward(self, obs: Tensor, priors: PriorTensors, order: str | None = None):
        x = self.stem(obs)
        tokens, diag = self.umpe(x, priors, order)
        diag["x"] = x
        diag["x_umpe"] = tokens
        return self.decoder(tokens), diag


def parameter_groups(model: MapModel) -> dict[str, list[nn.Parameter]]:
    """Prior branches vs BEV stem + decoder; asserts the two groups partition the model."""
    groups = {
        "prior": [p for m in (model.umpe,) for p in m.parameters() if p.requires_grad],
        "bev_decoder": [p for m in (model.stem, model.decoder) for p in m.parameters() if p.requires_grad],
    }
    seen: dict[int, str] = {}
    for name, ps in groups.items():
        for p in ps:
            if id(p) in seen:
                raise TrainingError(f"parameter in both {seen[id(p)]} and {name}")
            seen[id(p)] = name
    every = {id(p) for p in model.parameters() if p.requires_grad}
    if every != set(seen):
        raise TrainingError("parameter groups do not cover the model")
    return groups


def weights_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# loss


def _match(pred_pts: np.ndarray, gts: list[Instance], method: str) -> list[tuple[int, int]]:
    if not gts:
        return []
    g = np.stack([x.points for x in gts])
    cost = np.abs(pred_pts[:, None] - g[None]).mean((2, 3))
    if method == "hungarian":
        r, c = linear_sum_assignment(cost)
        return list(zip(r.tolist(), c.tolist()))
    pairs, used_p, used_g = [], set(), set()
    for flat in np.argsort(cost, axis=None, kind="stable"):
        i, j = divmod(int(flat), cost.shape[1])
        if i in used_p or j in used_g:
            continue
        pairs.append((i, j))
        used_p.add(i)
        used_g.add(j)
        if len(used_g) == len(gts):
            break
    return pairs


def total_loss(pred: MapPrediction, gt: Tensor, se2_terms: dict, cfg: TrainConfig,
               gt_inst: list | None = None) -> dict[str, Tensor]:
    """Task BCE (+ optional matched vector L1) plus every branch's SE(2) penalty."""
    out = {"bce": raster_bce(pred, gt, cfg.pos_weight)}
    if pred.vec_points is not None and gt_inst is not None:
        l1, cls_terms = [], []
        for b, insts in enumerate(gt_inst):
            pts = pred.vec_points[b]
            target = torch.zeros_like(pred.vec_logits[b])
            pairs = _match(pts.detach().cpu().numpy(), insts, cfg.matching)
            for i, j in pairs:
                gp = torch.from_numpy(insts[j].points).to(pts.dtype)
                l1.append((pts[i] - gp).abs().mean())
                target[i, insts[j].cls] = 1.0
            cls_terms.append(nn.functional.binary_cross_entropy_with_logits(pred.vec_logits[b], target))
        vec = torch.stack(l1).mean() if l1 else pred.vec_points.sum() * 0
        out["vec_l1"] = cfg.vector_weight * vec / K.Y_HALF
        out["vec_cls"] = torch.stack(cls_terms).mean()
    for k, v in se2_terms.items():
        out[k] = v
    out["total"] = sum(out.values())
    return out


# --------------------------------------------------------------------------
# training


def git_revision() -> str:
    try:
        return subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                              cwd=Path(__file__).parent, timeout=5).stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def variant_mask(cfg: TrainConfig) -> np.ndarray:
    return np.array([cfg.use_vector, cfg.use_vector, cfg.use_raster, cfg.use_raster], dtype=np.float32)


def alpha_schedule(cfg: TrainConfig) -> AlphaSchedule:
    return AlphaSchedule(cfg.stage1_epochs, cfg.stage2_epochs, cfg.alpha_stage1, cfg.alpha_stage2,
                         cfg.alpha_stage2_mode)


def stage_lrs(cfg: TrainConfig, epoch: int) -> dict[str, float]:
    f = 1.0 if epoch < cfg.stage1_epochs else cfg.stage2_lr_factor
    return {"prior": cfg.lr_prior * f, "bev_decoder": cfg.lr_bev_decoder * f}


def build_model(cfg: TrainConfig, grid: BEVGridSpec | None = None) -> MapModel:
    torch.manual_seed(cfg.seed)
    model = MapModel(cfg, grid)
    return model.double() if cfg.double else model


def apply_dropout(presence: np.ndarray, rng: np.random.Generator, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise SourceDropout; returns (new presence, (B, 2) per-family drop flags)."""
    out = presence.copy()
    drops = np.zeros((len(presence), 2), dtype=bool)
    for i, row in enumerate(presence):
        d = source_dropout(dict(zip(K.ALL_SOURCES, row.tolist())), rng, p)
        out[i] = [d[s] for s in K.ALL_SOURCES]
        drops[i] = [(out[i, :2] != row[:2]).any(), (out[i, 2:] != row[2:]).any()]
    return out, drops


def train_two_stage(cfg: TrainConfig, frames: FrameSet | None = None, out_dir: str | Path | None = None,
                    grid: BEVGridSpec | None = None):
    """Run both curriculum stages; returns (model, metric records)."""
    grid = grid or BEVGridSpec()
    frames = frames if frames is not None else load_frames(cfg.data_dir, grid)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = torch.float64 if cfg.double else torch.float32
    model = build_model(cfg, grid)
    groups = parameter_groups(model)
    opt = torch.optim.AdamW([{"params": groups["prior"], "name": "prior"},
                             {"params": groups["bev_decoder"], "name": "bev_decoder"}],
                            lr=cfg.lr_prior, weight_decay=cfg.weight_decay)
    sched = alpha_schedule(cfg)
    vmask = variant_mask(cfg)
    records = []
    log_path = out / "metrics.jsonl"
    log_path.write_text("")
    w0 = float(model.umpe.fusion.w_res.weight.detach().norm())
    records.append(_emit(log_path, {"event": "init", "w_res_norm": w0, "config_hash": cfg.hash()}))

    n = len(frames)
    for epoch in range(cfg.epochs):
        stage = 1 if epoch < cfg.stage1_epochs else 2
        lrs = stage_lrs(cfg, epoch)
        for g in opt.param_groups:
            g["lr"] = lrs[g["name"]]
        if not cfg.learnable_alpha:
            model.umpe.fusion.set_alpha(alpha_at(epoch, sched))
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        steps = math.ceil(n / cfg.batch_size)
        if cfg.max_steps_per_epoch:
            steps = min(steps, cfg.max_steps_per_epoch)
        sums: dict[str, float] = {}
        drop_counts = np.zeros(2)
        frames_seen = 0
        model.train()
        for s in range(steps):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            pres = frames.presence[idx] * vmask
            if cfg.source_dropout > 0 and (stage == 1 or cfg.dropout_in_stage2):
                pres, drops = apply_dropout(pres, rng, cfg.source_dropout)
                drop_counts += drops.sum(0)
            frames_seen += len(idx)
            batch = make_batch(frames, idx, pres, dtype)
            pred, diag = model(batch.obs, batch.priors)
            losses = total_loss(pred, batch.gt, diag["reg"], cfg,
                                [frames.gt_instances[i] for i in idx] if cfg.vector_head else None)
            if not torch.isfinite(losses["total"]):
                dump = out / f"nan_batch_e{epoch}_s{s}.pt"
                torch.save({"index": idx, "presence": pres, "losses": {k: float(v.detach()) for k, v in losses.items()}}, dump)
                raise TrainingError(f"non-finite loss at epoch {epoch} step {s}; batch dumped to {dump}")
            opt.zero_grad(set_to_none=True)
            losses["total"].backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
        rec = {"event": "epoch", "epoch": epoch, "stage": stage, "alpha": float(model.umpe.fusion.alpha),
               "lr_prior": lrs["prior"], "lr_bev_decoder": lrs["bev_decoder"],
               "w_res_norm": float(model.umpe.fusion.w_res.weight.detach().norm()),
               "drop_rate_vector": float(drop_counts[0] / max(frames_seen, 1)),
               "drop_rate_raster": float(drop_counts[1] / max(frames_seen, 1))}
        rec.update({k: v / steps for k, v in sums.items()})
        records.append(_emit(log_path, rec))
        log.info("epoch %d stage %d loss %.4f alpha %.3f", epoch, stage, rec["total"], rec["alpha"])
    save_checkpoint(model, cfg, out / "checkpoint.pt")
    return model, records


def _emit(path: Path, rec: dict) -> dict:
    with path.open("a") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")
    return rec


def save_checkpoint(model: MapModel, cfg: TrainConfig, path: str | Path) -> None:
    torch.save({"state_dict": model.state_dict(), "config": cfg.to_dict(), "config_hash": cfg.hash(),
                "git_rev": git_revision()}, path)


def load_checkpoint(path: str | Path, grid: BEVGridSpec | None = None) -> tuple[MapModel, TrainConfig]:
    from umpe.config import from_dict

    ck = torch.load(path, map_location="cpu", weights_only=False)
    cfg = from_dict(ck["config"])
    model = build_model(cfg, grid)
    model.load_state_dict(ck["state_dict"])
    model.eval()
    return model, cfg


# --------------------------------------------------------------------------
# evaluation


def subset_mask(bits) -> np.ndarray:
    return np.asarray(bits, dtype=np.float32)


def subset_name(bits) -> str:
    names = [n for n, b in zip(SUBSET_NAMES, bits) if b]
    return "+".join(names) if names else "none"


def all_subsets() -> list[tuple[int, ...]]:
    """The 16 presence patterns over (hd, sd, sat, rsd), empty first."""
    return sorted(itertools.product((0, 1), repeat=4), key=lambda b: (sum(b), [-x for x in b]))


def _instances_from_pred(pred: MapPrediction, b: int) -> list[Instance]:
    pts = pred.vec_points[b].detach().cpu().numpy().astype(np.float64)
    scores = pred.vec_scores[b].detach().cpu().numpy()
    out = []
    for q in range(len(pts)):
        c = int(scores[q].argmax())
        out.append(Instance(c, pts[q], float(scores[q, c]), q))
    return out


@torch.no_grad()
def evaluate(model: MapModel, frames: FrameSet, subset=None, batch_size: int = 32,
             order: str | None = None) -> dict:
    """Per-class IoU (and Chamfer mAP when the vector head is on) under a forced subset."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    acc = IoUAccumulator()
    ap_frames = []
    # default: the sources the model was trained with
    mask = subset_mask(subset) if subset is not None else variant_mask(model.cfg)
    for s in range(0, len(frames), batch_size):
        idx = np.arange(s, min(s + batch_size, len(frames)))
        batch = make_batch(frames, idx, frames.presence[idx] * mask, dtype)
        pred, _ = model(batch.obs, batch.priors, order)
        acc.update(pred.class_rasters.float().numpy(), batch.gt.float().numpy())
        if pred.vec_points is not None:
            for k, i in enumerate(idx):
                ap_frames.append((_instances_from_pred(pred, k), frames.gt_instances[i]))
    model.train(was_training)
    per = acc.per_class()
    res = {"iou": {c: float(v) for c, v in zip(K.MAP_CLASSES, per)}, "miou": float(per.mean())}
    if ap_frames:
        ap = evaluate_ap(ap_frames)
        res["ap"] = {K.MAP_CLASSES[c]: v for c, v in ap.per_class.items()}
        res["map"] = ap.mAP
    return res


def eval_powerset(model: MapModel, frames: FrameSet, subsets=None, batch_size: int = 32) -> list[dict]:
    """Evaluate one frozen model under every requested presence pattern."""
    subsets = subsets if subsets is not None else all_subsets()
    before = weights_hash(model)
    rows = []
    for bits in subsets:
        r = evaluate(model, frames, bits, batch_size)
        rows.append({"subset": subset_name(bits), "bits": list(bits), **r})
    if weights_hash(model) != before:
        raise TrainingError("evaluation mutated model weights")
    return rows
