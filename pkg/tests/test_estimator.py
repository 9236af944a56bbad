import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from arche import ArcheCodec
from arche.estimator import check_image, check_images
from arche.model import save_checkpoint

TINY = dict(main_channels=8, latent_depth=16, hyper_depth=8, hyper_hidden=8, hyper_synth_widths=(8, 8),
            slice_hidden=16, slice_mid=8, se_reduction=4, channel_features=4, context_width=8,
            param_hidden=8, lrp_hidden=8)


def images(n=3, size=(32, 32), seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, size + (3,), dtype=np.uint8) for _ in range(n)]


@pytest.fixture(scope="module")
def fitted():
    est = ArcheCodec(steps=2, batch_size=2, crop_size=16, slice_widths=(4, 4, 4, 4), model_options=TINY)
    return est.fit(images())


class TestValidation:
    def test_float_image(self):
        out = check_image(np.full((4, 5, 3), 0.5))
        assert out.dtype == np.uint8 and np.all(out == 128)

    def test_rejects_bad_shapes_and_ranges(self):
        with pytest.raises(ValueError):
            check_image(np.zeros((4, 5)))
        with pytest.raises(ValueError):
            check_image(np.full((4, 4, 3), 1.5))
        with pytest.raises(ValueError):
            check_image(np.full((4, 4, 3), 300))
        with pytest.raises(ValueError):
            check_image(np.full((4, 4, 3), np.nan))

    def test_batch(self):
        assert len(check_images(np.zeros((2, 8, 8, 3), np.uint8))) == 2
        with pytest.raises(ValueError):
            check_images(np.zeros((8, 8, 3)))
        with pytest.raises(ValueError):
            check_images([])


class TestEstimator:
    def test_params_round_trip(self):
        est = ArcheCodec(lmbda=0.1, context_variant="checkerboard")
        p = est.get_params()
        assert p["lmbda"] == 0.1 and p["context_variant"] == "checkerboard"
        assert clone(est).get_params() == p

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            ArcheCodec().transform(images(1))

    def test_fit_transform_inverse(self, fitted):
        imgs = images(2, (20, 36), seed=1)
        streams = fitted.transform(imgs)
        assert all(isinstance(s, bytes) and s[:4] == b"ARCH" for s in streams)
        recon = fitted.inverse_transform(streams)
        assert [r.shape for r in recon] == [(20, 36, 3)] * 2
        assert all(np.array_equal(a, b) for a, b in zip(recon, fitted.predict(imgs)))
        assert len(fitted.loss_curve_) == 2

    def test_score_is_negative_cost(self, fitted):
        s = fitted.score(images(1, seed=2))
        assert np.isfinite(s) and s < 0

    def test_fit_rejects_all_small(self):
        with pytest.raises(ValueError):
            ArcheCodec(steps=1, crop_size=64).fit(images(2, (32, 32)))

    def test_from_checkpoint(self, fitted, tmp_path):
        save_checkpoint(tmp_path / "w.ckpt", fitted.model_)
        est = ArcheCodec.from_checkpoint(tmp_path / "w.ckpt")
        img = images(1, seed=3)
        assert est.transform(img) == fitted.transform(img)
