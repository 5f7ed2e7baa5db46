import numpy as np

from bevforecast import plots


def test_pnm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    plots.write_ppm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(plots.read_pnm(tmp_path / "a.ppm"), rgb)
    g = rgb[..., 0]
    plots.write_pgm(tmp_path / "a.pgm", g)
    assert np.array_equal(plots.read_pnm(tmp_path / "a.pgm"), g)


def test_scene_outputs(micro_trajs):
    f = micro_trajs[0].frames[0]
    track = np.array([[0.0, 5.0], [0.5, 6.0]])
    img = plots.scene_image(f, track, track + 1, scale=2)
    assert img.shape == (256, 256, 3)
    assert (img == plots.PRED_RGB).all(axis=-1).any() and (img == plots.GT_RGB).all(axis=-1).any()
    svg = plots.scene_svg(f, track, track + 1)
    assert svg.startswith("<svg") and svg.count("<polyline") == 2
    assert svg == plots.scene_svg(f, track, track + 1)


def test_histogram_image():
    img = plots.histogram_image([1, 4, 2], width=30, height=20)
    assert img.shape == (20, 30)
    assert img[:, 10:19].sum() > img[:, :9].sum() > 0
    assert not plots.histogram_image([]).any()
