"""Qualitative comparison grids written as binary PPM/PGM."""
from __future__ import annotations

from pathlib import Path

import numpy as np

GAP = 4
LABEL_H = 9
RED = (255, 0, 0)
GREEN = (0, 200, 0)
BLUE = (40, 90, 255)
WHITE = (255, 255, 255)

# 3x5 bitmap glyphs, rows top to bottom
_GLYPHS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "001", "001", "001"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    ".": ("000", "000", "000", "000", "010"),
    "-": ("000", "000", "111", "000", "000"),
}


def grid_size(n: int, size: int, rows: int = 2) -> tuple[int, int]:
    """(height, width) in pixels of a ``rows`` x ``n`` grid of ``size`` tiles."""
    return rows * (size + LABEL_H) + (rows + 1) * GAP, n * size + (n + 1) * GAP


def select_slice(mask: np.ndarray) -> int:
    """Axial slice with the largest ground-truth lesion area."""
    m = mask[0] if mask.ndim == 4 else mask
    return int(np.argmax(m.reshape(m.shape[0], -1).sum(axis=1)))


def _gray(img: np.ndarray) -> np.ndarray:
    g = np.clip((np.asarray(img, dtype=np.float64) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def _contour(mask: np.ndarray) -> np.ndarray:
    m = np.pad(mask.astype(bool), 1)
    inner = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return mask.astype(bool) & ~inner


def overlay(base: np.ndarray, pred: np.ndarray, gt: np.ndarray, color) -> np.ndarray:
    """RGB tile: prediction blended in ``color``, ground-truth outline in red."""
    rgb = _gray(base).astype(np.float64)
    p = np.asarray(pred).astype(bool)
    rgb[p] = 0.5 * rgb[p] + 0.5 * np.array(color)
    rgb[_contour(np.asarray(gt))] = RED
    return rgb.astype(np.uint8)


def draw_text(canvas: np.ndarray, text: str, top: int, left: int, color=WHITE) -> None:
    x = left
    for ch in text:
        glyph = _GLYPHS.get(ch)
        if glyph is not None:
            for r, row in enumerate(glyph):
                for c, bit in enumerate(row):
                    if bit == "1" and top + r < canvas.shape[0] and x + c < canvas.shape[1]:
                        canvas[top + r, x + c] = color
        x += 4


def write_ppm(rgb: np.ndarray, path) -> None:
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(gray: np.ndarray, path) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pnm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, dims, maxval, rest = blob.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if magic == b"P6":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
    if magic == b"P5":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
    raise ValueError(f"not a binary PPM/PGM: {magic!r}")


def export_comparison_grid(bases, predictions_a, predictions_b, gts, out_path,
                           dice_a=None, dice_b=None) -> tuple[int, int]:
    """Two-row grid: row 1 overlays ``predictions_a`` (blue), row 2 ``predictions_b`` (green).

    Ground truth is outlined in red on both rows; per-scan dice values, when
    given, are printed under each tile. Returns the image (height, width).
    """
    n = len(bases)
    if not (n == len(predictions_a) == len(predictions_b) == len(gts)) or n == 0:
        raise ValueError("bases, both prediction lists and ground truths need equal, non-zero length")
    size = np.asarray(bases[0]).shape[0]
    h, w = grid_size(n, size)
    canvas = np.zeros((h, w, 3), dtype=np.uint8)
    for row, (preds, color, scores) in enumerate(((predictions_a, BLUE, dice_a), (predictions_b, GREEN, dice_b))):
        top = GAP + row * (size + LABEL_H + GAP)
        for i in range(n):
            left = GAP + i * (size + GAP)
            canvas[top:top + size, left:left + size] = overlay(bases[i], preds[i], gts[i], color)
            if scores is not None:
                draw_text(canvas, f"{scores[i]:.2f}", top + size + 2, left + 1, color)
    write_ppm(canvas, out_path)
    return h, w


def export_mr_grid(real, generated, out_path) -> tuple[int, int]:
    """Grayscale grid: real MR slices on top, generated ones below."""
    n = len(real)
    if n == 0 or n != len(generated):
        raise ValueError("need equal, non-zero numbers of real and generated slices")
    size = np.asarray(real[0]).shape[0]
    h, w = grid_size(n, size)
    canvas = np.zeros((h, w), dtype=np.uint8)
    for row, imgs in enumerate((real, generated)):
        top = GAP + row * (size + LABEL_H + GAP)
        for i, img in enumerate(imgs):
            left = GAP + i * (size + GAP)
            canvas[top:top + size, left:left + size] = _gray(img)[..., 0]
    write_pgm(canvas, out_path)
    return h, w
