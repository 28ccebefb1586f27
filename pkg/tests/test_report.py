import numpy as np
from PIL import Image

from patternflow.maps import DisparityMap
from patternflow.report import error_map, flow_rgb, save_convergence_plot, save_error_heatmap, save_flow_image


def test_error_map_of_constant_offset_is_uniform(tmp_path):
    g = DisparityMap.from_disparity(np.full((30, 40), 70.0))
    p = DisparityMap.from_disparity(g.d + 3.0)
    err = save_error_heatmap(p, g, tmp_path / "e.png")
    assert np.all(err == 3.0)
    assert (tmp_path / "e.png").stat().st_size > 0


def test_error_map_marks_invalid():
    g = DisparityMap.from_disparity(np.full((4, 4), 10.0))
    valid = np.ones((4, 4), bool)
    valid[0, 0] = False
    p = DisparityMap(g.d + 1, valid, np.ones((4, 4)))
    e = error_map(p, g)
    assert np.isnan(e[0, 0]) and np.all(e[valid] == 1.0)


def test_zero_flow_is_neutral(tmp_path):
    rgb = save_flow_image(np.zeros((6, 8)), np.ones((6, 8), bool), tmp_path / "f.png", scale=4)
    assert rgb.shape == (24, 32, 3)
    assert np.ptp(rgb.reshape(-1, 3), axis=0).max() < 1e-9
    assert np.all(rgb > 0.95)  # white
    png = np.asarray(Image.open(tmp_path / "f.png"))
    assert png.shape[:2] == (24, 32)


def test_flow_colors_by_direction():
    u = np.array([[2.0, -2.0, 0.0, np.inf]])
    rgb = flow_rgb(u)
    assert rgb[0, 0, 0] > rgb[0, 0, 2]  # positive: red
    assert rgb[0, 1, 2] > rgb[0, 1, 0]  # negative: blue
    np.testing.assert_allclose(rgb[0, 3], 0.5)  # invalid: gray
    # symmetric scale: equal magnitudes get mirrored colors
    np.testing.assert_allclose(rgb[0, 0, [0, 2]], rgb[0, 1, [2, 0]], atol=0.02)


def test_convergence_plot(tmp_path):
    save_convergence_plot({"full": [3.0, 1.0, 0.5], "no_warp": [3.0, 1.2, 0.7]}, tmp_path / "c.png")
    assert (tmp_path / "c.png").exists()
