"""Raster branch: shared FiLM-conditioned backbone, SE(2) micro-alignment, gates."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from umpe import constants as K
from umpe.geometry import BEVGridSpec, affine_theta, flatten_hw, warp_bilinear
from umpe.vector_encoder import GateNetwork, gated_fuse, mlp, se2_regularizer


class FiLM(nn.Module):
    """(1 + gamma) * A + beta with [gamma, beta] = W c + b, zero-initialized."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, a: Tensor, c: Tensor) -> Tensor:
        gamma, beta = self.proj(c).chunk(2, -1)
        return film(a, gamma, beta)


def film(a: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Channel-wise affine broadcast over the spatial dims of a (B, C, H, W) map."""
    return (1 + gamma[..., None, None]) * a + beta[..., None, None]


class SourceEmbedding(nn.Module):
    def __init__(self, num_sources: int = 2, dim: int = 32):
        super().__init__()
        self.num_sources = num_sources
        self.net = mlp(num_sources, dim, dim)

    def forward(self, src_idx: Tensor) -> Tensor:
        onehot = F.one_hot(src_idx, self.num_sources).to(self.net[0].weight.dtype)
        return self.net(onehot)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(x + self.c2(F.relu(self.c1(x))))


class Stage(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, kernel: int = 3):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)
        self.block = ResBlock(c_out) if kernel > 1 else nn.Conv2d(c_out, c_out, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(F.relu(self.down(x)))


@dataclass
class RasterConfig:
    width: int = 32
    stage_widths: tuple = (16, 32, 64, 64)
    # 4 x stride 2 would leave ~4x2 cells on the 60x30 desk canvas
    stage_strides: tuple = (2, 2, 1, 1)
    kernel: int = 3
    resnet18: bool = False
    cond_dim: int = 32
    per_source_film: bool = False
    gate_mode: str = "feature"  # "feature" or "condition"
    align: bool = True
    eps: float = K.EPS
    lambda_t: float = 0.1
    lambda_r: float = 1.0
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)


class Backbone(nn.Module):
    """Residual stages with FiLM after every stage."""

    def __init__(self, cfg: RasterConfig):
        super().__init__()
        if cfg.resnet18:
            from torchvision.models import resnet18

            net = resnet18(weights=None)
            self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
            self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
            widths = (64, 128, 256, 512)
        else:
            self.stem = nn.Identity()
            widths = cfg.stage_widths
            c_in = [3, *widths[:-1]]
            self.stages = nn.ModuleList(
                Stage(ci, co, s, cfg.kernel) for ci, co, s in zip(c_in, widths, cfg.stage_strides))
        n_film = 2 if cfg.per_source_film else 1
        self.films = nn.ModuleList(
            nn.ModuleList(FiLM(cfg.cond_dim, w) for w in widths) for _ in range(n_film))
        self.out_channels = widths[-1]

    def forward(self, img: Tensor, cond: Tensor, src_idx: int = 0) -> Tensor:
        films = self.films[min(src_idx, len(self.films) - 1)]
        h = self.stem(img)
        for stage, f in zip(self.stages, films):
            h = f(stage(h), cond)
        return h


class MicroAlign(nn.Module):
    """Pooled raster feature + pooled BEV reference -> lattice-frame pose."""

    def __init__(self, width: int, hidden: int = 64):
        super().__init__()
        self.net = mlp(2 * width, hidden, 3, zero_last=True)

    def forward(self, fmap: Tensor, bev_ref: Tensor) -> Tensor:
        return self.net(torch.cat([fmap.mean((2, 3)), bev_ref.mean(1)], -1))


def micro_align(fmap: Tensor, bev_ref: Tensor, grid: BEVGridSpec, regressor: MicroAlign | None,
                lambda_t: float = 0.1, lambda_r: float = 1.0, pose: Tensor | None = None):
    """Predict a pose, warp ``fmap`` onto the BEV lattice, flatten to tokens.

    Returns (pose, aligned map, tokens, (translation reg, rotation reg)). A
    given ``pose`` bypasses the regressor.
    """
    if pose is None:
        pose = regressor(fmap, bev_ref)
    theta = affine_theta(pose, grid)
    aligned = warp_bilinear(fmap, theta)
    return pose, aligned, flatten_hw(aligned), se2_regularizer(pose, lambda_t, lambda_r)


class RasterEncoder(nn.Module):
    """Satellite + rasterized-SD images -> fused raster tokens."""

    def __init__(self, cfg: RasterConfig, grid: BEVGridSpec):
        super().__init__()
        self.cfg, self.grid = cfg, grid
        self.embed = SourceEmbedding(2, cfg.cond_dim)
        self.backbone = Backbone(cfg)
        self.proj = nn.Conv2d(self.backbone.out_channels, cfg.width, 1)
        self.align = nn.ModuleList(MicroAlign(cfg.width) for _ in range(2))
        self.gate = GateNetwork(cfg.width)
        self.cond_gate_proj = nn.Linear(cfg.cond_dim, cfg.width) if cfg.gate_mode == "condition" else None
        self.register_buffer("mean", torch.tensor(cfg.mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(cfg.std).view(1, 3, 1, 1))

    def encode_raster(self, img: Tensor, src_idx: int) -> Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, C, H, W) source-conditioned features."""
        b = img.shape[0]
        idx = torch.full((b,), src_idx, dtype=torch.long, device=img.device)
        cond = self.embed(idx).to(img.dtype)
        x = (img - self.mean.to(img.dtype)) / self.std.to(img.dtype)
        h = self.backbone(x, cond, src_idx)
        h = self.proj(h)
        return F.interpolate(h, size=(self.grid.height, self.grid.width), mode="bilinear",
                             align_corners=True)

    def forward(self, bev_ref: Tensor, sat: Tensor, rsd: Tensor, presence: Tensor, poses: dict | None = None):
        """Images (B, 3, H, W); presence (B, 2) over (sat, rsd). Returns (Zbar, diagnostics).

        ``poses`` optionally replaces the regressed corrections, keyed "sat"/"rsd".
        """
        cfg = self.cfg
        given = poses or {}
        present = presence > 0
        tokens, poses, reg = [], [], {}
        for i, (name, img) in enumerate((("sat", sat), ("rsd", rsd))):
            on = present[:, i]
            img = torch.where(on[:, None, None, None], img, torch.zeros_like(img))
            fmap = self.encode_raster(img, i)
            if cfg.align:
                pose, _, tok, (t, r) = micro_align(fmap, bev_ref, self.grid, self.align[i],
                                                   cfg.lambda_t, cfg.lambda_r, given.get(name))
            else:
                pose = fmap.new_zeros(fmap.shape[0], 3)
                tok, t, r = flatten_hw(fmap), fmap.new_zeros(fmap.shape[0]), fmap.new_zeros(fmap.shape[0])
            tok = tok * on.to(tok.dtype)[:, None, None]
            tokens.append(tok)
            poses.append(pose)
            reg[f"se2_t_{name}"] = (t * on).mean()
            reg[f"se2_r_{name}"] = (r * on).mean()
        evidence = None
        if cfg.gate_mode == "condition":
            idx = torch.arange(2, device=sat.device)
            c = self.cond_gate_proj(self.embed(idx).to(sat.dtype))
            evidence = c.reshape(1, -1).expand(sat.shape[0], -1)
        zbar, g_sat, g_rsd = gated_fuse(tokens[0], tokens[1], self.gate, presence, cfg.eps, evidence)
        absent = ~present.any(-1)
        zbar = torch.where(absent[:, None, None], torch.zeros_like(zbar), zbar)
        diag = {"g_sat": g_sat, "g_rsd": g_rsd, "pose_sat": poses[0], "pose_rsd": poses[1],
                "absent": absent, "reg": reg}
        return zbar, diag
