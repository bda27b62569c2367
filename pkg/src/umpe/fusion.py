"""Zero-initialized residual fusion, alpha schedule and the two-branch pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from umpe.geometry import BEVGridSpec
from umpe.raster_encoder import RasterConfig, RasterEncoder
from umpe.vector_encoder import PolylineBatch, VectorConfig, VectorEncoder

ALPHA_MAX = 0.6


@dataclass
class AlphaSchedule:
    stage1_epochs: int = 20
    stage2_epochs: int = 10
    stage1_ceiling: float = 0.2
    stage2_ceiling: float = 0.6
    stage2_mode: str = "step"  # or "linear"


def alpha_at(epoch: float, sched: AlphaSchedule) -> float:
    """Residual scale for an epoch: linear 0 -> ceiling over stage 1, then stage 2."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    e1 = sched.stage1_epochs
    if epoch < e1:
        span = max(e1 - 1, 1)
        a = sched.stage1_ceiling * min(epoch / span, 1.0)
    elif sched.stage2_mode == "step":
        a = sched.stage2_ceiling
    else:
        frac = (epoch - e1 + 1) / max(sched.stage2_epochs, 1)
        a = sched.stage1_ceiling + (sched.stage2_ceiling - sched.stage1_ceiling) * min(frac, 1.0)
    return float(min(max(a, 0.0), ALPHA_MAX))


class ResidualFusion(nn.Module):
    """X = LN(Ybar) + alpha * W LN(Zbar), W zero-initialized."""

    def __init__(self, width: int, learnable_alpha: bool = False):
        super().__init__()
        self.ln_y = nn.LayerNorm(width)
        self.ln_z = nn.LayerNorm(width)
        self.w_res = nn.Linear(width, width, bias=False)
        nn.init.zeros_(self.w_res.weight)
        if learnable_alpha:
            self.alpha = nn.Parameter(torch.zeros(()))
        else:
            self.register_buffer("alpha", torch.zeros(()))

    def set_alpha(self, value: float) -> None:
        with torch.no_grad():
            self.alpha.fill_(value)

    def forward(self, ybar: Tensor, zbar: Tensor, raster_on: Tensor | None = None) -> Tensor:
        res = self.alpha.to(zbar.dtype) * self.w_res(self.ln_z(zbar))
        if raster_on is not None:
            # LN of an all-zero frame is its bias, so absent frames are gated out explicitly
            res = res * raster_on.to(res.dtype)[:, None, None]
        return self.ln_y(ybar) + res


def residual_fuse(ybar: Tensor, zbar: Tensor, fusion: ResidualFusion, raster_on: Tensor | None = None) -> Tensor:
    return fusion(ybar, zbar, raster_on)


@dataclass
class PriorTensors:
    """Batched priors. presence (B, 4) over (hd, sd, sat, rsd)."""

    hd: PolylineBatch
    sd: PolylineBatch
    sat: Tensor
    rsd: Tensor
    presence: Tensor

    def with_presence(self, presence: Tensor) -> "PriorTensors":
        return PriorTensors(self.hd, self.sd, self.sat, self.rsd, presence)


@dataclass
class UMPEConfig:
    width: int = 32
    order: str = "vr"
    learnable_alpha: bool = False
    vector: VectorConfig = field(default_factory=VectorConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)


class UMPE(nn.Module):
    """Vector stage then raster residual (``order='vr'``), or the reverse."""

    def __init__(self, cfg: UMPEConfig, grid: BEVGridSpec):
        super().__init__()
        if cfg.order not in ("vr", "rv"):
            raise ValueError(f"unknown fusion order {cfg.order!r}")
        self.cfg, self.grid = cfg, grid
        cfg.vector.width = cfg.raster.width = cfg.width
        cfg.vector.num_tokens = grid.num_tokens
        self.vector = VectorEncoder(cfg.vector, grid)
        self.raster = RasterEncoder(cfg.raster, grid)
        self.fusion = ResidualFusion(cfg.width, cfg.learnable_alpha)

    def forward(self, x: Tensor, priors: PriorTensors, order: str | None = None):
        order = order or self.cfg.order
        pres = priors.presence
        raster_on = (pres[:, 2:] > 0).any(-1)
        if order == "vr":
            ybar, vdiag = self._vector(x, priors)
            zbar, rdiag = self._raster(x, priors)
            out = self.fusion(ybar, zbar, raster_on)
        else:
            zbar, rdiag = self._raster(x, priors)
            x_r = self.fusion(x, zbar, raster_on)
            ybar, vdiag = self._vector(x_r, priors)
            out = ybar
        reg = {**vdiag.pop("reg"), **rdiag.pop("reg")}
        return out, {"vector": vdiag, "raster": rdiag, "reg": reg, "ybar": ybar, "zbar": zbar}


    def _vector(self, x: Tensor, priors: PriorTensors):
        pres = priors.presence[:, :2]
        if (pres > 0).any():
            return self.vector(x, priors.hd, priors.sd, pres)
        # every frame passes through; skipping the branch gives the same Ybar
        return x, _idle_diag(x, ("hd", "sd"), passthrough=True)

    def _raster(self, x: Tensor, priors: PriorTensors):
        pres = priors.presence[:, 2:]
        if (pres > 0).any():
            return self.raster(x, priors.sat, priors.rsd, pres)
        return torch.zeros_like(x), _idle_diag(x, ("sat", "rsd"), passthrough=False)


def _idle_diag(x: Tensor, names, passthrough: bool) -> dict:
    """Diagnostics of a branch with no source present in any frame."""
    b, c = x.shape[0], x.shape[-1]
    zero = x.new_zeros(())
    diag = {f"g_{n}": x.new_zeros(b, c) for n in names}
    diag.update({f"pose_{n}": x.new_zeros(b, 3) for n in names})
    diag["passthrough" if passthrough else "absent"] = torch.ones(b, dtype=torch.bool, device=x.device)
    diag["reg"] = {f"se2_{k}_{n}": zero for n in names for k in ("t", "r")}
    return diag


def fuse_pipeline(model: UMPE, x: Tensor, priors: PriorTensors, order: str = "vr") -> Tensor:
    return model(x, priors, order)[0]
