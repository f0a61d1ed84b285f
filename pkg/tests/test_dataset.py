import logging

import numpy as np
import pytest

from bevterrain import dataset, formats, synth
from bevterrain.grid import GridSpec
from bevterrain.pseudo_label import VOID

SPEC = GridSpec(0.4, 0.0, -12.8, 64, 64)


@pytest.fixture(scope="module")
def small():
    ds, _ = synth.make_dataset(seed=3, frames=3, spec=SPEC, camera=synth.default_camera(128, 64))
    return ds


def test_write_load_round_trip(small, tmp_path):
    dataset.write_dataset(small, tmp_path)
    back = dataset.load_dataset(tmp_path)
    assert back.indices == [0, 1, 2]
    assert back.spec == SPEC and back.num_classes == small.num_classes
    for a, b in zip(small.frames, back.frames):
        assert np.array_equal(a.cloud.points.astype(np.float32), b.cloud.points)
        assert np.array_equal(a.image.probs.astype(np.float32), b.image.probs)
        assert np.array_equal(a.truth, b.truth)
        assert np.allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-12, rtol=0)


def test_missing_image_skips_frame(small, tmp_path, caplog):
    dataset.write_dataset(small, tmp_path)
    (tmp_path / "images" / "000001.semf").unlink()
    with caplog.at_level(logging.WARNING):
        back = dataset.load_dataset(tmp_path)
    assert back.indices == [0, 2]
    assert "000001" in caplog.text and "image" in caplog.text


def test_pgm_images_accepted(small, tmp_path):
    dataset.write_dataset(small, tmp_path)
    path = tmp_path / "images" / "000000.semf"
    labels = formats.read_semantic_image(path).probs.argmax(axis=0)
    path.unlink()
    formats.write_pgm_labels(tmp_path / "images" / "000000.pgm", labels.astype(np.uint8))
    img = dataset.load_dataset(tmp_path).frame(0).image
    assert np.array_equal(img.probs.argmax(axis=0), labels)


def test_override_config_wins(small, tmp_path):
    dataset.write_dataset(small, tmp_path)
    back = dataset.load_dataset(tmp_path, {"origin_x": "-3.5"})
    assert back.spec.origin_x == -3.5
    with pytest.raises(formats.FormatError, match="5 classes, expected 7"):
        dataset.load_dataset(tmp_path, {"num_classes": "7"})


def test_bad_setting_is_format_error(small, tmp_path):
    dataset.write_dataset(small, tmp_path)
    with pytest.raises(formats.FormatError, match="bad setting"):
        dataset.load_dataset(tmp_path, {"grid_width": "wide"})


def test_image_size_must_match_calibration(small, tmp_path):
    dataset.write_dataset(small, tmp_path)
    formats.write_semantic_image(tmp_path / "images" / "000002.semf", small.frames[0].image.__class__(np.full((5, 2, 2), 0.2)))
    with pytest.raises(formats.FormatError, match="calibration"):
        dataset.load_dataset(tmp_path)


def test_missing_directory():
    with pytest.raises(formats.FormatError):
        dataset.load_dataset("/nonexistent/bevterrain")


def test_window_and_lookup(small):
    assert [f.index for f in small.window(0, 1)] == [0, 1]
    assert [f.index for f in small.window(1, 4)] == [0, 1, 2]
    with pytest.raises(KeyError):
        small.frame(9)


def test_config_comments_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# settings\nalpha0 = 0.7\nwindow=2  # frames\nalpha0=0.9\n")
    assert dataset.read_config(p) == {"alpha0": "0.9", "window": "2"}
    p.write_text("alpha0\n")
    with pytest.raises(formats.FormatError) as info:
        dataset.read_config(p)
    assert info.value.line == 1


def test_pipeline_steps_shapes(small):
    pl = dataset.frame_pseudo_labels(small, 1)
    assert pl.label.shape == SPEC.shape
    assert (pl.label[pl.observed] != VOID).all()
    feats = dataset.frame_features(small, small.frame(1), (1, 2))
    assert feats.channels == 2 * (6 + small.num_classes + 1)
