"""Toy BEV stem and mapping head standing in for a full online-mapping stack."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from umpe import constants as K
from umpe.geometry import BEVGridSpec, flatten_hw, unflatten_hw


class BEVStem(nn.Module):
    """Lift the (C_obs, H, W) observation to C-channel BEV tokens."""

    def __init__(self, c_obs: int = K.NUM_MAP_CLASSES, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_obs, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
        )

    def forward(self, obs: Tensor) -> Tensor:
        return flatten_hw(self.net(obs))


@dataclass
class MapPrediction:
    logits: Tensor  # (B, 3, H, W)
    vec_points: Tensor | None = None  # (B, Nq, P, 2) metres
    vec_logits: Tensor | None = None  # (B, Nq, 3)

    @property
    def class_rasters(self) -> Tensor:
        return torch.sigmoid(self.logits)

    @property
    def vec_scores(self) -> Tensor | None:
        return None if self.vec_logits is None else torch.sigmoid(self.vec_logits)


class VectorQueryHead(nn.Module):
    """N_q learned queries, two cross-attention layers, P-point regression + class scores."""

    def __init__(self, width: int, num_queries: int = 20, num_points: int = K.POINTS_PER_POLYLINE,
                 num_layers: int = 2, num_heads: int = 4):
        super().__init__()
        self.num_points = num_points
        self.queries = nn.Parameter(torch.randn(num_queries, width) * 0.02)
        layer = nn.TransformerDecoderLayer(width, num_heads, 2 * width, dropout=0.0, batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, num_layers)
        self.reg = nn.Linear(width, num_points * 2)
        self.cls = nn.Linear(width, K.NUM_MAP_CLASSES)
        self.register_buffer("scale", torch.tensor([K.X_HALF, K.Y_HALF]))

    def forward(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        b = tokens.shape[0]
        h = self.decoder(self.queries[None].expand(b, -1, -1), tokens)
        pts = torch.tanh(self.reg(h)).view(b, -1, self.num_points, 2) * self.scale.to(h.dtype)
        return pts, self.cls(h)


class MapDecoder(nn.Module):
    def __init__(self, width: int, grid: BEVGridSpec, vector_head: bool = False, num_queries: int = 20):
        super().__init__()
        self.grid = grid
        self.conv = nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(width, K.NUM_MAP_CLASSES, 1))
        self.vector = VectorQueryHead(width, num_queries) if vector_head else None

    def forward(self, tokens: Tensor) -> MapPrediction:
        fmap = unflatten_hw(tokens, self.grid.height, self.grid.width)
        pred = MapPrediction(self.conv(fmap))
        if self.vector is not None:
            pred.vec_points, pred.vec_logits = self.vector(tokens)
        return pred


def decode_map(decoder: MapDecoder, tokens: Tensor) -> MapPrediction:
    return decoder(tokens)


def raster_bce(pred: MapPrediction, gt: Tensor, pos_weight: float = 1.0) -> Tensor:
    pw = torch.tensor(pos_weight, dtype=pred.logits.dtype)
    return F.binary_cross_entropy_with_logits(pred.logits, gt, pos_weight=pw)
