"""Vector branch: polyline tokens, confidence-biased dual cross-attention, gates.

Token layout for one polyline (fixed): for each of the P points in order, the
4K sinusoid block ``[sin(w_k x), cos(w_k x), sin(w_k y), cos(w_k y)]`` for
k = 1..K (k-major); then the category one-hot; then the 2-way source one-hot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from umpe import constants as K
from umpe.geometry import BEVGridSpec, se2_apply


def default_freqs(num_freqs: int = K.NUM_FREQS, base: float = K.BASE_FREQ) -> Tensor:
    return base * 2.0 ** torch.arange(num_freqs, dtype=torch.float64)


def sinusoidal_embed(x: Tensor, y: Tensor, freqs: Tensor) -> Tensor:
    """(...,) coordinates -> (..., 4K) features, k-major."""
    freqs = freqs.to(x.dtype)
    ax = x[..., None] * freqs
    ay = y[..., None] * freqs
    out = torch.stack([torch.sin(ax), torch.cos(ax), torch.sin(ay), torch.cos(ay)], -1)
    return out.flatten(-2)


def tokenize_polyline(pl: Tensor, cat: Tensor, src: Tensor, freqs: Tensor) -> Tensor:
    """Raw token z = [flattened point encodings; category; source].

    pl (..., P, 2), cat (..., K_cat), src (..., 2) -> (..., P*4K + K_cat + 2).
    """
    if pl.shape[-1] != 2 or src.shape[-1] != 2:
        raise ValueError(f"bad polyline/source shapes {tuple(pl.shape)} {tuple(src.shape)}")
    if pl.shape[:-2] != cat.shape[:-1] or cat.shape[:-1] != src.shape[:-1]:
        raise ValueError("leading dims of polyline, category and source must agree")
    enc = sinusoidal_embed(pl[..., 0], pl[..., 1], freqs).flatten(-2)
    return torch.cat([enc, cat.to(enc.dtype), src.to(enc.dtype)], -1)


def token_width(num_points: int = K.POINTS_PER_POLYLINE, num_freqs: int = K.NUM_FREQS,
                num_cats: int = K.NUM_SD_CLASSES) -> int:
    return num_points * 4 * num_freqs + num_cats + 2


def se2_regularizer(pose: Tensor, lambda_t: float, lambda_r: float) -> tuple[Tensor, Tensor]:
    """Per-sample translation and rotation penalties, lambda_t |T|^2 and lambda_r dtheta^2."""
    trans = lambda_t * (pose[..., 0] ** 2 + pose[..., 1] ** 2)
    rot = lambda_r * pose[..., 2] ** 2
    return trans, rot


def mlp(d_in: int, d_hidden: int, d_out: int, zero_last: bool = False) -> nn.Sequential:
    net = nn.Sequential(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))
    if zero_last:
        nn.init.zeros_(net[-1].weight)
        nn.init.zeros_(net[-1].bias)
    return net


@dataclass
class PolylineBatch:
    """Padded polylines for one source: points (B, N, P, 2), cats (B, N) long, mask (B, N)."""

    points: Tensor
    cats: Tensor
    mask: Tensor

    @property
    def count(self) -> Tensor:
        return self.mask.sum(-1)


@dataclass
class PolylineTokens:
    tokens: Tensor  # (B, N, C)
    confidence: Tensor  # (B, N), in (0, 1)
    mask: Tensor  # (B, N) valid entries


class PolylineEncoder(nn.Module):
    """Linear lift, 6-layer self-attention encoder, sigmoid confidence head.

    No positional encoding across polylines, so the map is permutation
    equivariant over the N axis.
    """

    def __init__(self, d_in: int, width: int, num_layers: int = 6, num_heads: int = 4,
                 ff_mult: int = 2):
        super().__init__()
        self.proj = nn.Linear(d_in, width)
        layer = nn.TransformerEncoderLayer(width, num_heads, ff_mult * width, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers, enable_nested_tensor=False)
        self.conf_head = nn.Linear(width, 1)

    def forward(self, z: Tensor, mask: Tensor | None = None) -> PolylineTokens:
        if mask is None:
            mask = torch.ones(z.shape[:2], dtype=torch.bool, device=z.device)
        if z.shape[1] == 0:
            width = self.proj.out_features
            return PolylineTokens(z.new_zeros(z.shape[0], 0, width), z.new_zeros(z.shape[0], 0), mask)
        h = self.proj(z)
        # Rows with no valid key would give NaN attention; let them see their padding.
        pad = ~mask
        empty = ~mask.any(-1)
        if empty.any():
            pad = pad.clone()
            pad[empty] = False
        h = self.encoder(h, src_key_padding_mask=pad)
        conf = torch.sigmoid(self.conf_head(h)).squeeze(-1)
        return PolylineTokens(h, conf, mask)


class PoseRegressor(nn.Module):
    """Mean-pooled polyline coordinates + mean BEV token -> (dx, dy, dtheta)."""

    def __init__(self, width: int, hidden: int = 64):
        super().__init__()
        self.net = mlp(2 + width, hidden, 3, zero_last=True)

    def forward(self, points: Tensor, mask: Tensor, bev: Tensor) -> Tensor:
        w = mask.to(points.dtype)[..., None, None]
        denom = (w.sum((1, 2)) * points.shape[2]).clamp_min(1.0)
        pooled_pts = (points * w).sum((1, 2)) / denom
        return self.net(torch.cat([pooled_pts, bev.mean(1)], -1))


def biased_attention(q: Tensor, k: Tensor, v: Tensor, conf: Tensor, key_mask: Tensor | None = None,
                     eps: float = K.EPS) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d) + log clamp(conf, eps, 1)) v.

    q (B, h, Lq, d), k/v (B, h, N, d), conf (B, N) broadcast over heads and
    queries. Returns (output, weights). Rows with no valid key return zeros.
    """
    d = q.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    bias = torch.log(conf.clamp(eps, 1.0))[:, None, None, :]
    logits = logits + bias
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        has_key = key_mask.any(-1)[:, None, None, None]
        logits = torch.where(has_key, logits, torch.zeros_like(logits))
    weights = torch.softmax(logits, -1)
    if key_mask is not None:
        weights = torch.where(has_key, weights, torch.zeros_like(weights))
    return weights @ v, weights


class DualCrossAttention(nn.Module):
    """BEV queries attend to HD and SD tokens in two separate softmaxes.

    W_Q is shared; W_K, W_V and the output projection are per source unless
    ``share_kv`` is set.
    """

    def __init__(self, width: int, num_heads: int = 4, share_kv: bool = False, eps: float = K.EPS):
        super().__init__()
        if width % num_heads:
            raise ValueError("width must be divisible by num_heads")
        self.h, self.d, self.eps = num_heads, width // num_heads, eps
        self.q = nn.Linear(width, width)
        n_kv = 1 if share_kv else 2
        self.k = nn.ModuleList(nn.Linear(width, width) for _ in range(n_kv))
        self.v = nn.ModuleList(nn.Linear(width, width) for _ in range(n_kv))
        self.out = nn.ModuleList(nn.Linear(width, width) for _ in range(n_kv))

    def _heads(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.h, self.d).transpose(1, 2)

    def attend(self, q: Tensor, tok: PolylineTokens, idx: int) -> Tensor:
        idx = min(idx, len(self.k) - 1)
        b, lq, _ = q.shape
        if tok.tokens.shape[1] == 0:
            return q.new_zeros(b, lq, self.h * self.d)
        k = self._heads(self.k[idx](tok.tokens))
        v = self._heads(self.v[idx](tok.tokens))
        y, _ = biased_attention(self._heads(q), k, v, tok.confidence, tok.mask, self.eps)
        y = y.transpose(1, 2).reshape(b, lq, self.h * self.d)
        y = self.out[idx](y)
        # a source with no polylines in this frame contributes exactly zero
        return y * tok.mask.any(-1).to(y.dtype)[:, None, None]

    def forward(self, x: Tensor, tok_hd: PolylineTokens, tok_sd: PolylineTokens) -> tuple[Tensor, Tensor]:
        q = self.q(x)
        return self.attend(q, tok_hd, 0), self.attend(q, tok_sd, 1)


def presence_gates(logits_a: Tensor, logits_b: Tensor, presence: Tensor, eps: float = K.EPS,
                   bound: float = K.GATE_LOGIT_BOUND) -> tuple[Tensor, Tensor]:
    """Per-channel softmax over two sources with log(pi + eps) offsets.

    logits (B, C), presence (B, 2) in {0, 1}. Logits are clamped to
    [-bound, bound] first: log(1e-8) is only -18.4, so an unbounded logit gap
    could otherwise reopen the gate of an absent source.
    """
    offs = torch.log(presence.to(logits_a.dtype) + eps)
    la, lb = logits_a.clamp(-bound, bound), logits_b.clamp(-bound, bound)
    stacked = torch.stack([la + offs[:, :1], lb + offs[:, 1:]], 0)
    g = torch.softmax(stacked, 0)
    return g[0], g[1]


class GateNetwork(nn.Module):
    """Two-layer network mapping pooled (B, 2C) evidence to (B, 2C) gate logits."""

    def __init__(self, width: int):
        super().__init__()
        self.net = mlp(2 * width, 2 * width, 2 * width)

    def forward(self, evidence: Tensor) -> tuple[Tensor, Tensor]:
        logits = self.net(evidence)
        return logits.chunk(2, -1)


def gated_fuse(y_a: Tensor, y_b: Tensor, gate_net: GateNetwork, presence: Tensor,
               eps: float = K.EPS, evidence: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Mix two (B, HW, C) streams with presence-normalized channel gates.

    Returns (mix, g_a, g_b). The caller decides what an all-absent frame
    becomes.
    """
    if evidence is None:
        evidence = torch.cat([y_a.mean(1), y_b.mean(1)], -1)
    la, lb = gate_net(evidence)
    ga, gb = presence_gates(la, lb, presence, eps)
    return ga[:, None, :] * y_a + gb[:, None, :] * y_b, ga, gb


def gated_fuse_vec(y_hd: Tensor, y_sd: Tensor, x: Tensor, gate_net: GateNetwork, presence: Tensor,
                   eps: float = K.EPS) -> tuple[Tensor, dict]:
    """Gated vector mix; frames with both sources absent pass X through unchanged."""
    mix, g_hd, g_sd = gated_fuse(y_hd, y_sd, gate_net, presence, eps)
    absent = ~(presence > 0).any(-1)
    out = torch.where(absent[:, None, None], x, mix)
    return out, {"g_hd": g_hd, "g_sd": g_sd, "passthrough": absent}


@dataclass
class VectorConfig:
    width: int = 32
    num_layers: int = 6
    num_heads: int = 4
    num_freqs: int = K.NUM_FREQS
    num_cats: int = K.NUM_SD_CLASSES
    num_points: int = K.POINTS_PER_POLYLINE
    share_kv: bool = False
    residual: bool = True
    eps: float = K.EPS
    lambda_t: float = 0.1
    lambda_r: float = 1.0
    num_tokens: int = K.CANVAS_H * K.CANVAS_W
    query_pos: str = "sinusoid"  # or "learned"
    extra: dict = field(default_factory=dict)


class VectorEncoder(nn.Module):
    """HD/SD polylines -> fused vector-prior BEV tokens."""

    def __init__(self, cfg: VectorConfig, grid: BEVGridSpec | None = None):
        super().__init__()
        if cfg.query_pos not in ("sinusoid", "learned"):
            raise ValueError(f"unknown query_pos {cfg.query_pos!r}")
        self.cfg = cfg
        self.register_buffer("freqs", default_freqs(cfg.num_freqs).float())
        self.pose = nn.ModuleList(PoseRegressor(cfg.width) for _ in range(2))
        self.encoder = PolylineEncoder(token_width(cfg.num_points, cfg.num_freqs, cfg.num_cats),
                                       cfg.width, cfg.num_layers, cfg.num_heads)
        # cell centres encoded with the polyline frequencies give queries a location
        # the keys can match; without a grid fall back to a learned table
        self.cell_proj = None
        if cfg.query_pos == "sinusoid" and grid is not None:
            rows, cols = torch.meshgrid(torch.arange(grid.height), torch.arange(grid.width), indexing="ij")
            ego = torch.as_tensor(grid.pixel_to_ego(torch.stack([rows, cols], -1).reshape(-1, 2).numpy()))
            self.register_buffer("cell_enc", sinusoidal_embed(ego[:, 0], ego[:, 1], self.freqs.double()).float())
            self.cell_proj = nn.Linear(4 * cfg.num_freqs, cfg.width)
        else:
            self.query_pos = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.width))
            nn.init.normal_(self.query_pos, std=0.02)
        self.attn = DualCrossAttention(cfg.width, cfg.num_heads, cfg.share_kv, cfg.eps)
        self.gate = GateNetwork(cfg.width)

    def query_position(self, dtype) -> Tensor:
        if self.cell_proj is None:
            return self.query_pos.to(dtype)
        return self.cell_proj(self.cell_enc.to(dtype))[None]

    def encode_source(self, pl: PolylineBatch, src_idx: int, bev: Tensor, pose: Tensor | None = None):
        cfg = self.cfg
        if pose is None:
            pose = self.pose[src_idx](pl.points, pl.mask, bev)
        pts = se2_apply(pose[:, None, :], pl.points)
        cat = F.one_hot(pl.cats.clamp_min(0), cfg.num_cats).to(pts.dtype)
        src = torch.zeros(*pl.cats.shape, 2, dtype=pts.dtype, device=pts.device)
        src[..., src_idx] = 1
        z = tokenize_polyline(pts, cat, src, self.freqs.to(pts.dtype))
        return self.encoder(z, pl.mask), pose

    def forward(self, x: Tensor, hd: PolylineBatch, sd: PolylineBatch, presence: Tensor,
                poses: dict | None = None):
        """x (B, HW, C); presence (B, 2) over (hd, sd). Returns (Ybar, diagnostics).

        ``poses`` optionally replaces the regressed corrections, keyed "hd"/"sd".
        """
        cfg = self.cfg
        poses = poses or {}
        present = presence > 0
        hd = _mask_absent(hd, present[:, 0])
        sd = _mask_absent(sd, present[:, 1])
        tok_hd, pose_hd = self.encode_source(hd, 0, x, poses.get("hd"))
        tok_sd, pose_sd = self.encode_source(sd, 1, x, poses.get("sd"))
        q_in = x + self.query_position(x.dtype)
        y_hd, y_sd = self.attn(q_in, tok_hd, tok_sd)
        ybar, diag = gated_fuse_vec(y_hd, y_sd, x, self.gate, presence, cfg.eps)
        if cfg.residual:
            ybar = torch.where(diag["passthrough"][:, None, None], ybar, x + ybar)
        reg = {}
        for name, pose, on in (("hd", pose_hd, present[:, 0]), ("sd", pose_sd, present[:, 1])):
            t, r = se2_regularizer(pose, cfg.lambda_t, cfg.lambda_r)
            reg[f"se2_t_{name}"] = (t * on).mean()
            reg[f"se2_r_{name}"] = (r * on).mean()
        diag.update(pose_hd=pose_hd, pose_sd=pose_sd, conf_hd=tok_hd.confidence,
                    conf_sd=tok_sd.confidence, reg=reg)
        return ybar, diag


def _mask_absent(pl: PolylineBatch, present: Tensor) -> PolylineBatch:
    """Drop every polyline of a frame whose source is absent; zero its payload."""
    mask = pl.mask & present[:, None]
    pts = torch.where(mask[..., None, None], pl.points, torch.zeros_like(pl.points))
    return PolylineBatch(pts, torch.where(mask, pl.cats, torch.zeros_like(pl.cats)), mask)
