"""Program-drawn stroke glyphs on a 16x16 design grid.

Each glyph is a list of polylines in unit coordinates (x right, y down).
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw

GLYPH_SIZE = 16


def _arc(cx, cy, rx, ry, a0, a1, n=14):
    """Points along an ellipse arc; angles in degrees, 0 = right, 90 = down."""
    ts = np.linspace(math.radians(a0), math.radians(a1), n)
    return [(cx + rx * math.cos(t), cy + ry * math.sin(t)) for t in ts]


STROKES: dict[str, list[list[tuple[float, float]]]] = {
    "0": [_arc(0.5, 0.5, 0.28, 0.4, 0, 360, 24)],
    "1": [[(0.32, 0.28), (0.52, 0.1), (0.52, 0.9)]],
    "2": [_arc(0.5, 0.33, 0.28, 0.23, 200, 370) + [(0.22, 0.9), (0.8, 0.9)]],
    "3": [_arc(0.48, 0.3, 0.26, 0.2, 200, 450), _arc(0.48, 0.69, 0.3, 0.21, 270, 520)],
    "4": [[(0.66, 0.9), (0.66, 0.1), (0.18, 0.66), (0.84, 0.66)]],
    "5": [[(0.78, 0.1), (0.3, 0.1), (0.27, 0.46)] + _arc(0.5, 0.64, 0.29, 0.26, 225, 505)],
    "6": [[(0.72, 0.12)] + _arc(0.58, 0.5, 0.36, 0.38, 250, 180, 6) + _arc(0.5, 0.68, 0.28, 0.22, 180, 540)],
    "7": [[(0.2, 0.1), (0.8, 0.1), (0.42, 0.9)]],
    "8": [_arc(0.5, 0.29, 0.23, 0.19, 0, 360, 20), _arc(0.5, 0.7, 0.28, 0.21, 0, 360, 20)],
    "9": [_arc(0.5, 0.32, 0.27, 0.22, 0, 360, 20), [(0.77, 0.32), (0.7, 0.9)]],
    "a": [_arc(0.45, 0.64, 0.24, 0.24, 0, 360, 18), [(0.69, 0.38), (0.72, 0.9)]],
    "b": [[(0.3, 0.08), (0.3, 0.9)], _arc(0.5, 0.66, 0.21, 0.23, 180, 540, 18)],
    "c": [_arc(0.52, 0.64, 0.27, 0.25, 40, 320, 16)],
    "n": [[(0.28, 0.4), (0.28, 0.9)], [(0.28, 0.58)] + _arc(0.5, 0.58, 0.22, 0.17, 180, 360, 8) + [(0.72, 0.9)]],
    "x": [[(0.24, 0.4), (0.76, 0.9)], [(0.76, 0.4), (0.24, 0.9)]],
    "y": [[(0.24, 0.4), (0.5, 0.72)], [(0.78, 0.4), (0.36, 1.0)]],
    "d": [_arc(0.45, 0.66, 0.23, 0.23, 0, 360, 18), [(0.7, 0.08), (0.7, 0.9)]],
    "+": [[(0.5, 0.22), (0.5, 0.78)], [(0.22, 0.5), (0.78, 0.5)]],
    "-": [[(0.2, 0.5), (0.8, 0.5)]],
    "=": [[(0.2, 0.38), (0.8, 0.38)], [(0.2, 0.62), (0.8, 0.62)]],
    "(": [_arc(0.8, 0.5, 0.45, 0.48, 130, 230, 12)],
    ")": [_arc(0.2, 0.5, 0.45, 0.48, -50, 50, 12)],
    "\\int": [_arc(0.68, 0.12, 0.14, 0.1, 180, 360, 6)[::-1] + [(0.52, 0.2), (0.48, 0.8)]
              + _arc(0.32, 0.88, 0.14, 0.1, 0, 180, 6)],
}


def render_glyph(symbol: str, width: int, height: int, thickness: float = 1.4,
                 jitter: np.ndarray | None = None) -> np.ndarray:
    """Rasterize a glyph into a ``(height, width)`` uint8 array, ink = 255.

    ``jitter`` is an optional 2x3 affine applied to unit coordinates.
    """
    img = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(img)
    w = max(1, int(round(thickness)))
    for line in STROKES[symbol]:
        pts = np.asarray(line, dtype=np.float64)
        if jitter is not None:
            pts = pts @ jitter[:, :2].T + jitter[:, 2]
        px = [(float(x * (width - 1)), float(y * (height - 1))) for x, y in pts]
        draw.line(px, fill=255, width=w, joint="curve")
    return np.asarray(img, dtype=np.uint8)
