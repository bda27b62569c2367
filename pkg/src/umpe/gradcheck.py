"""Central finite-difference checks of the prior encoders' analytic gradients.

Every check reduces a module output to a scalar with a fixed random
projection, then compares autograd against (f(t + h) - f(t - h)) / 2h on a
sample of entries of the tensor under test. The reported error is
``|g_auto - g_fd| / max(|g_auto|, |g_fd|)`` over the sampled entries, so a
handful of tiny components cannot dominate it. Everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

from umpe.fusion import ResidualFusion
from umpe.geometry import BEVGridSpec
from umpe.raster_encoder import RasterConfig, RasterEncoder
from umpe.vector_encoder import PolylineBatch, VectorConfig, VectorEncoder

STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    entries: int
    grad_norm: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance and self.grad_norm > 0

    def to_dict(self) -> dict:
        return {"name": self.name, "rel_error": self.rel_error, "entries": self.entries,
                "grad_norm": self.grad_norm, "passed": self.passed}


def check_gradient(name: str, fn: Callable[[], Tensor], target: Tensor, gen: torch.Generator,
                   h: float = STEP, max_entries: int = 24) -> GradCheckResult:
    """Compare d<fn(), R>/d target by autograd and by central differences.

    ``target`` must be a leaf with requires_grad; it is perturbed in place and
    restored after each probe.
    """
    with torch.no_grad():
        proj = torch.randn(fn().shape, generator=gen, dtype=torch.float64)

    def scalar() -> Tensor:
        return (fn() * proj).sum()

    target.grad = None
    (grad,) = torch.autograd.grad(scalar(), target)
    flat = target.detach().view(-1)
    n = flat.numel()
    idx = torch.randperm(n, generator=gen)[:max_entries] if n > max_entries else torch.arange(n)
    fd = torch.empty(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for j, i in enumerate(idx.tolist()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(scalar())
            flat[i] = orig - h
            down = float(scalar())
            flat[i] = orig
            fd[j] = (up - down) / (2 * h)
    auto = grad.reshape(-1)[idx]
    denom = max(float(auto.norm()), float(fd.norm()), 1e-300)
    return GradCheckResult(name, float((auto - fd).norm()) / denom, len(idx), float(auto.norm()))


def _randomize(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.3) -> None:
    """Overwrite every parameter, so zero-initialized heads do not hide terms."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def _polylines(gen: torch.Generator, b: int, n: int, p: int, num_cats: int) -> PolylineBatch:
    pts = torch.rand(b, n, p, 2, generator=gen, dtype=torch.float64) * 8 - 4
    cats = torch.randint(0, num_cats, (b, n), generator=gen)
    return PolylineBatch(pts, cats, torch.ones(b, n, dtype=torch.bool))


def vector_suite(seed: int = 0) -> list[GradCheckResult]:
    """Ybar w.r.t. polyline coordinates, an SE(2) correction and gate weights."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    b, hw, c, n, p = 1, 6, 8, 3, 4
    cfg = VectorConfig(width=c, num_layers=2, num_heads=2, num_points=p, num_tokens=hw)
    enc = VectorEncoder(cfg).double()
    _randomize(enc, gen)
    x = torch.randn(b, hw, c, generator=gen, dtype=torch.float64)
    hd = _polylines(gen, b, n, p, cfg.num_cats)
    sd = _polylines(gen, b, n, p, cfg.num_cats)
    presence = torch.ones(b, 2, dtype=torch.float64)
    out = []

    pts = hd.points.clone().requires_grad_(True)
    hd_var = PolylineBatch(pts, hd.cats, hd.mask)
    out.append(check_gradient("vector/polyline_coords",
                              lambda: enc(x, hd_var, sd, presence)[0], pts, gen))

    pose = (torch.randn(b, 3, generator=gen, dtype=torch.float64) * 0.2).requires_grad_(True)
    out.append(check_gradient("vector/pose",
                              lambda: enc(x, hd, sd, presence, poses={"hd": pose})[0], pose, gen))

    weight = enc.gate.net[0].weight
    out.append(check_gradient("vector/gate_weights", lambda: enc(x, hd, sd, presence)[0], weight, gen))
    return out


def raster_suite(seed: int = 0) -> list[GradCheckResult]:
    """Zbar w.r.t. FiLM parameters and an SE(2) correction."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    grid = BEVGridSpec(height=8, width=4)
    c = 4
    cfg = RasterConfig(width=c, stage_widths=(4, 4, 4, 4), cond_dim=4)
    enc = RasterEncoder(cfg, grid).double()
    _randomize(enc, gen)
    b = 1
    bev = torch.randn(b, grid.num_tokens, c, generator=gen, dtype=torch.float64)
    sat = torch.rand(b, 3, 16, 8, generator=gen, dtype=torch.float64)
    rsd = torch.rand(b, 3, 16, 8, generator=gen, dtype=torch.float64)
    presence = torch.ones(b, 2, dtype=torch.float64)
    out = []
    for i, f in enumerate(enc.backbone.films[0]):
        out.append(check_gradient(f"raster/film_stage{i}",
                                  lambda: enc(bev, sat, rsd, presence)[0], f.proj.weight, gen))
    pose = (torch.randn(b, 3, generator=gen, dtype=torch.float64) * 0.2).requires_grad_(True)
    pose_rsd = torch.tensor([[0.31, -0.17, 0.05]], dtype=torch.float64)
    out.append(check_gradient("raster/pose",
                              lambda: enc(bev, sat, rsd, presence, poses={"sat": pose, "rsd": pose_rsd})[0],
                              pose, gen))
    return out


def fusion_suite(seed: int = 0) -> list[GradCheckResult]:
    """Fused tokens w.r.t. alpha, the residual projection and both branch outputs."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    b, hw, c = 2, 6, 8
    fusion = ResidualFusion(c, learnable_alpha=True).double()
    _randomize(fusion, gen)
    fusion.set_alpha(0.3)
    ybar = torch.randn(b, hw, c, generator=gen, dtype=torch.float64).requires_grad_(True)
    zbar = torch.randn(b, hw, c, generator=gen, dtype=torch.float64).requires_grad_(True)
    on = torch.tensor([True, True])

    def run():
        return fusion(ybar, zbar, on)

    return [
        check_gradient("fusion/alpha", run, fusion.alpha, gen),
        check_gradient("fusion/w_res", run, fusion.w_res.weight, gen),
        check_gradient("fusion/ybar", run, ybar, gen),
        check_gradient("fusion/zbar", run, zbar, gen),
    ]


def run_all(seed: int = 0) -> list[GradCheckResult]:
    return vector_suite(seed) + raster_suite(seed) + fusion_suite(seed)
