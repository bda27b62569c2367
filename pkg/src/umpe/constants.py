"""Frame and canvas conventions shared by every module.

Ego BEV frame: +x forward, +y left, metres, ego at the origin. The window is
60 m long (x in [-30, 30]) and 30 m wide (y in [-15, 15]).

Image lattice: row 0 is the forward-most row (x = +30), column 0 is the
left-most column (y = +15). Rows therefore run along ego x, columns along
ego y. Pixel centres sit half a pixel inside the window edge.

Normalized sampling coordinates follow the align-corners rule: pixel i of an
axis with N pixels maps to -1 + 2 i / (N - 1). The first normalized axis is
the column axis, the second the row axis (grid_sample ordering).
"""
from __future__ import annotations

import math

X_EXTENT = 60.0
Y_EXTENT = 30.0
X_HALF = X_EXTENT / 2
Y_HALF = Y_EXTENT / 2

POINTS_PER_POLYLINE = 11

# Default desk-scale canvas: 1 m per pixel.
CANVAS_H = 60
CANVAS_W = 30

MAP_CLASSES = ("ped_crossing", "divider", "boundary")
NUM_MAP_CLASSES = len(MAP_CLASSES)

SD_CLASSES = (
    "motorway",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "residential",
    "service",
    "unclassified",
)
NUM_SD_CLASSES = len(SD_CLASSES)

VECTOR_SOURCES = ("hd", "sd")
RASTER_SOURCES = ("sat", "rsd")
ALL_SOURCES = VECTOR_SOURCES + RASTER_SOURCES

EPS = 1e-8
# |gate logit| cap; a gap of at most 10 keeps an absent source's gate below 3e-4
GATE_LOGIT_BOUND = 5.0

# Sinusoidal embedding: K frequencies, lowest one spans the 60 m extent.
NUM_FREQS = 8
BASE_FREQ = 2 * math.pi / X_EXTENT
