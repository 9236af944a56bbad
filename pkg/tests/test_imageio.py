import numpy as np
import pytest

from arche.imageio import (list_images, read_ppm, synthetic_image, to_uint8, write_ppm,
                           write_synthetic_corpus)


def test_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (13, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_to_uint8_rounds_half_up_and_clips():
    np.testing.assert_array_equal(to_uint8(np.array([-0.2, 0.5 / 255, 1.5 / 255, 128 / 255, 1.3])),
                                  [0, 1, 2, 128, 255])


def test_malformed(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"not an image")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "bad.ppm")


def test_grayscale_rejected(tmp_path):
    (tmp_path / "g.ppm").write_bytes(b"P5\n2 2\n255\n\x00\x01\x02\x03")
    with pytest.raises(ValueError, match="RGB"):
        read_ppm(tmp_path / "g.ppm")


def test_listing_sorted_and_filtered(tmp_path):
    for name in ("b.ppm", "a.ppm", "c.txt"):
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in list_images(tmp_path)] == ["a.ppm", "b.ppm"]
    with pytest.raises(FileNotFoundError):
        list_images(tmp_path / "missing")


def test_synthetic_corpus_seeded(tmp_path):
    a = write_synthetic_corpus(tmp_path / "a", 3, (40, 48), seed=2)
    b = write_synthetic_corpus(tmp_path / "b", 3, (40, 48), seed=2)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    img = read_ppm(a[0])
    assert img.shape == (40, 48, 3) and img.std() > 5


def test_synthetic_image_textured():
    img = synthetic_image(np.random.default_rng(1), 64, 64).astype(float)
    # horizontal differences are nonzero almost everywhere
    assert np.mean(np.abs(np.diff(img, axis=1)) > 0) > 0.5
