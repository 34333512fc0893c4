import numpy as np
import pytest

from ctmr import figures


@pytest.fixture
def tiles(rng):
    n, s = 5, 64
    bases = [rng.uniform(-1, 1, (s, s)) for _ in range(n)]
    gts = []
    for _ in range(n):
        g = np.zeros((s, s), np.uint8)
        g[20:40, 20:40] = 1
        gts.append(g)
    return bases, gts


class TestLayout:
    def test_grid_arithmetic(self):
        assert figures.grid_size(5, 64) == (2 * (64 + figures.LABEL_H) + 3 * figures.GAP, 5 * 64 + 6 * figures.GAP)
        assert figures.grid_size(5, 64) == (158, 344)

    def test_two_rows_five_columns(self, tiles, tmp_path):
        bases, gts = tiles
        preds = [g.copy() for g in gts]
        h, w = figures.export_comparison_grid(bases, preds, preds, gts, tmp_path / "g.ppm", [0.9] * 5, [0.8] * 5)
        img = figures.read_pnm(tmp_path / "g.ppm")
        assert img.shape == (h, w, 3) == (158, 344, 3)
        s, gap, lab = 64, figures.GAP, figures.LABEL_H
        for row in range(2):
            top = gap + row * (s + lab + gap)
            for col in range(5):
                left = gap + col * (s + gap)
                tile = img[top:top + s, left:left + s]
                assert (tile == figures.RED).all(axis=2).any()
        assert not img[:gap].any() and not img[:, :gap].any()

    def test_empty_prediction_is_base_plus_contour(self, tiles, tmp_path):
        bases, gts = tiles
        empty = [np.zeros_like(g) for g in gts]
        figures.export_comparison_grid(bases, empty, empty, gts, tmp_path / "e.ppm")
        img = figures.read_pnm(tmp_path / "e.ppm")
        g = figures.GAP
        tile = img[g:g + 64, g:g + 64].astype(int)
        expected = figures._gray(bases[0]).astype(int)
        contour = figures._contour(gts[0])
        expected[contour] = figures.RED
        np.testing.assert_array_equal(tile, expected)

    def test_prediction_colors_per_row(self, tiles, tmp_path):
        bases = [np.full((64, 64), -1.0)] * 5
        gts = [np.zeros((64, 64), np.uint8)] * 5
        pred = np.zeros((64, 64), np.uint8)
        pred[10:20, 10:20] = 1
        figures.export_comparison_grid(bases, [pred] * 5, [pred] * 5, gts, tmp_path / "c.ppm")
        img = figures.read_pnm(tmp_path / "c.ppm")
        g, s, lab = figures.GAP, 64, figures.LABEL_H
        top_px = img[g + 15, g + 15]
        bottom_px = img[2 * g + s + lab + 15, g + 15]
        np.testing.assert_array_equal(top_px, (np.array(figures.BLUE) * 0.5).astype(np.uint8))
        np.testing.assert_array_equal(bottom_px, (np.array(figures.GREEN) * 0.5).astype(np.uint8))

    def test_unequal_counts_rejected(self, tiles, tmp_path):
        bases, gts = tiles
        with pytest.raises(ValueError):
            figures.export_comparison_grid(bases, gts[:4], gts, gts, tmp_path / "x.ppm")

    def test_unwritable_path(self, tiles, tmp_path):
        bases, gts = tiles
        with pytest.raises(OSError):
            figures.export_comparison_grid(bases, gts, gts, gts, tmp_path / "missing" / "x.ppm")


class TestHelpers:
    def test_slice_with_largest_lesion(self):
        m = np.zeros((1, 4, 8, 8), np.uint8)
        m[0, 1, :2, :2] = 1
        m[0, 3, :3, :3] = 1
        assert figures.select_slice(m) == 3

    def test_dice_text_is_drawn(self):
        canvas = np.zeros((9, 20, 3), np.uint8)
        figures.draw_text(canvas, "0.75", 0, 0)
        assert canvas.any() and canvas[:, :3].any()

    def test_mr_grid(self, rng, tmp_path):
        real = [rng.uniform(-1, 1, (32, 32)) for _ in range(3)]
        h, w = figures.export_mr_grid(real, real, tmp_path / "m.pgm")
        img = figures.read_pnm(tmp_path / "m.pgm")
        assert img.shape == (h, w) == figures.grid_size(3, 32)
        g, s, lab = figures.GAP, 32, figures.LABEL_H
        np.testing.assert_array_equal(img[g:g + s, g:g + s], img[2 * g + s + lab:2 * g + 2 * s + lab, g:g + s])
