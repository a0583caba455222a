"""PNG rendering for sample grids, nearest-neighbor panels, and retrieval strips.

All functions take (m, 3, H, W) float arrays in [-1, 1] and produce
deterministic bytes for fixed inputs.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import ImageBatch, denormalize
from .errors import CrossganError

PAD = 2


def _as_array(images) -> np.ndarray:
    if isinstance(images, ImageBatch):
        return images.data
    return np.asarray(images)


def _tile(images: np.ndarray, rows: int, cols: int,
          mask: np.ndarray | None = None) -> Image.Image:
    """Lay out images row-major on a dark canvas; masked cells stay blank."""
    res = images.shape[2]
    cell = res + PAD
    canvas = np.zeros((rows * cell + PAD, cols * cell + PAD, 3), dtype=np.uint8)
    idx = 0
    for r in range(rows):
        for c in range(cols):
            if mask is not None and not mask[r, c]:
                continue
            if idx >= images.shape[0]:
                break
            tile = denormalize(images[idx]).transpose(1, 2, 0)
            y, x = PAD + r * cell, PAD + c * cell
            canvas[y:y + res, x:x + res] = tile
            idx += 1
    return Image.fromarray(canvas)


def save_grid(images, path: str | Path, cols: int | None = None) -> Path:
    """Square-ish grid; m must be a perfect square when cols is omitted."""
    data = _as_array(images)
    m = data.shape[0]
    if cols is None:
        cols = math.isqrt(m)
        if cols * cols != m:
            raise CrossganError(f"grid needs a perfect-square count, got {m}")
    rows = math.ceil(m / cols)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _tile(data, rows, cols).save(path)
    return path


def side_by_side(left, right, path: str | Path) -> Path:
    """Two same-count grids joined horizontally (S | L composites)."""
    a, b = _as_array(left), _as_array(right)
    if a.shape != b.shape:
        raise CrossganError("side_by_side needs same-shaped batches")
    m = a.shape[0]
    cols = math.isqrt(m)
    if cols * cols != m:
        raise CrossganError(f"side_by_side needs a perfect-square count, got {m}")
    im_a = _tile(a, cols, cols)
    im_b = _tile(b, cols, cols)
    canvas = Image.new("RGB", (im_a.width + im_b.width + PAD, im_a.height))
    canvas.paste(im_a, (0, 0))
    canvas.paste(im_b, (im_a.width + PAD, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)
    return path


def knn_panel(query: np.ndarray, neighbor_rows: list[np.ndarray],
              path: str | Path) -> Path:
    """Query tile at top left, one row of neighbor tiles per similarity row.

    ``query`` is a single (3, H, W) image; each entry of ``neighbor_rows`` is
    a (k_i, 3, H, W) batch. Rows may have differing k; cells beyond a row's
    count stay blank.
    """
    if not neighbor_rows:
        raise CrossganError("knn_panel needs at least one neighbor row")
    res = query.shape[1]
    k_max = max(r.shape[0] for r in neighbor_rows)
    rows = len(neighbor_rows)
    cols = 1 + k_max
    stack = [query[None]]
    mask = np.zeros((rows, cols), dtype=bool)
    mask[0, 0] = True
    for r, batch in enumerate(neighbor_rows):
        if batch.shape[2] != res:
            raise CrossganError("panel tiles must share one resolution")
        stack.append(batch)
        mask[r, 1:1 + batch.shape[0]] = True
    images = np.concatenate(stack, axis=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _tile(images, rows, cols, mask).save(path)
    return path


def pair_strip(top, bottom, path: str | Path, max_cols: int = 20) -> Path:
    """Two aligned rows (query frames above, matched frames below)."""
    a, b = _as_array(top), _as_array(bottom)
    n = min(a.shape[0], b.shape[0], max_cols)
    if n < 1:
        raise CrossganError("pair_strip needs at least one pair")
    images = np.concatenate([a[:n], b[:n]], axis=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _tile(images, 2, n).save(path)
    return path
