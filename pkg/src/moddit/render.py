"""Integer rasterization of the synthetic shapes world.

Everything is drawn by exact integer predicates on a pixel grid: no
anti-aliasing, no floating point, so renders are bit-identical across
platforms and detection templates can match stamps exactly.

Scene geometry: 32x32 images carved into a 4x4 grid of 8x8 cells. A subject
occupies one cell, drawn centered with half-extent 2 (small) or 3 (large),
which keeps every stamp inside its own cell and at or above the 12-pixel
detection floor. Reference crops re-draw the subject alone, roughly doubled,
centered on a neutral background.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .grammar import BG_COLORS, SHAPES, SIZES, SUBJECT_COLORS

IMAGE_SIZE = 32
GRID = 4
CELL = IMAGE_SIZE // GRID
SIZE_HALF = {"small": 2, "large": 3}
CROP_BG = (128, 128, 128)


def stamp(shape: str, h: int) -> np.ndarray:
    """Binary (2h+1) x (2h+1) mask for a shape of half-extent h.

    The five predicates are chosen to stay pairwise distinct at every
    half-extent used here (2 and 3 in scenes, up to 8 in crops).
    """
    if shape not in SHAPES:
        raise ValidationError(f"unknown shape {shape!r}")
    if h < 1:
        raise ValidationError(f"half-extent must be >= 1, got {h}")
    dy, dx = np.mgrid[-h : h + 1, -h : h + 1]
    if shape == "circle":
        return dx * dx + dy * dy <= h * h
    if shape == "square":
        return np.ones((2 * h + 1, 2 * h + 1), dtype=bool)
    if shape == "triangle":
        return 2 * np.abs(dx) <= dy + h
    if shape == "star":
        return (dx == 0) | (dy == 0) | (np.abs(dx) == np.abs(dy))
    # cross: plus sign with unit arm half-width
    return (np.abs(dx) <= 1) | (np.abs(dy) <= 1)


def paint(img: np.ndarray, mask_out, shape: str, color: str, h: int, cy: int, cx: int):
    """Draw a stamp centered at (cy, cx), clipped to the image."""
    st = stamp(shape, h)
    y0, x0 = cy - h, cx - h
    ys = slice(max(0, y0), min(img.shape[0], y0 + st.shape[0]))
    xs = slice(max(0, x0), min(img.shape[1], x0 + st.shape[1]))
    sub = st[ys.start - y0 : ys.stop - y0, xs.start - x0 : xs.stop - x0]
    img[ys, xs][sub] = SUBJECT_COLORS[color]
    if mask_out is not None:
        mask_out[ys, xs] |= sub


def render_scene(subjects, bg: str) -> tuple[np.ndarray, list[np.ndarray]]:
    """Render subjects onto a uniform background.

    subjects: iterable of (shape, color, size, cell_row, cell_col).
    Returns (uint8 image [32,32,3], per-subject boolean masks).
    """
    if bg not in BG_COLORS:
        raise ValidationError(f"unknown background {bg!r}")
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[:] = BG_COLORS[bg]
    masks = []
    taken = set()
    for shape, color, size, r, c in subjects:
        if not (0 <= r < GRID and 0 <= c < GRID):
            raise ValidationError(f"cell ({r},{c}) outside the {GRID}x{GRID} grid")
        if (r, c) in taken:
            raise ValidationError(f"two subjects share cell ({r},{c})")
        taken.add((r, c))
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        paint(img, mask, shape, color, SIZE_HALF[size], r * CELL + CELL // 2, c * CELL + CELL // 2)
        masks.append(mask)
    return img, masks


def render_crop(shape: str, color: str, size: str, bg=CROP_BG,
                jitter_h: int = 0, jitter_y: int = 0, jitter_x: int = 0) -> np.ndarray:
    """Reference crop: the subject alone, enlarged, centered on neutral ground.

    The crop half-extent is 2h+1, so small and large subjects stay visually
    distinct. Jitters support cross-image pairs (size +-1 px, position +-1).
    """
    if size not in SIZES:
        raise ValidationError(f"unknown size {size!r}")
    h = 2 * SIZE_HALF[size] + 1 + jitter_h
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[:] = bg
    paint(img, None, shape, color, h, IMAGE_SIZE // 2 + jitter_y, IMAGE_SIZE // 2 + jitter_x)
    return img
