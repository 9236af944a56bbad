import csv
import math
from types import SimpleNamespace

import numpy as np
import pytest

from arche import tensors as T
from arche.imageio import write_ppm
from arche.layers import GdnParams
from arche.model import ArcheModel, load_checkpoint
from arche.tensors import Tensor
from arche.training import (AdamState, CorpusStats, TrainConfig, TrainingDiverged, adam_step,
                            crop_positions, ingest_corpus, rd_loss, resume, train)
from helpers import tiny_config

RNG = np.random.default_rng(17)


class StubModel:
    """Returns a fixed reconstruction and a fixed bit count."""

    def __init__(self, x_hat, bits):
        self.x_hat = x_hat
        self.bits = bits

    def forward(self, x, rng):
        return SimpleNamespace(x_hat=Tensor(self.x_hat), total_bits=lambda: Tensor(float(self.bits)))


class TestConfig:
    def test_rejects_bad_lambda_and_crop(self):
        with pytest.raises(ValueError):
            TrainConfig(lmbda=0.0)
        with pytest.raises(ValueError):
            TrainConfig(crop_size=60)

    def test_desk_preset(self):
        c = TrainConfig.desk(lmbda=0.1)
        assert c.learning_rate == 1e-3 and c.batch_size == 8 and c.crop_size == 64
        assert c.model.lmbda == 0.1

    def test_from_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("lambda: 0.005\nsteps: 3\nmodel:\n  main_channels: 8\n")
        c = TrainConfig.from_file(p)
        assert c.lmbda == 0.005 and c.steps == 3 and c.model.main_channels == 8

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("epochs: 400\n")
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig.from_file(p)


class TestRdLoss:
    def test_one_bit_perfect(self):
        x = RNG.uniform(size=(1, 16, 16, 3))
        out = rd_loss(x, StubModel(x, 1.0), 0.01, RNG)
        assert out.total.item() == 1 / 256
        assert out.distortion_mse == 0.0

    def test_offset_distortion(self):
        x = RNG.uniform(size=(2, 16, 32, 3))
        out = rd_loss(x, StubModel(x + 0.1, 0.0), 0.01, RNG)
        assert out.distortion_mse == pytest.approx(0.01, rel=1e-12)

    def test_total_is_stored_sum(self):
        m = ArcheModel(tiny_config(), seed=0)
        out = rd_loss(RNG.uniform(size=(2, 32, 32, 3)), m, 0.01, np.random.default_rng(0))
        assert out.total.item() == out.rate_bpp + out.lmbda_eff * out.distortion_mse
        assert out.lmbda_eff == 0.01 * 255 ** 2

    def test_rejects_unpadded(self):
        with pytest.raises(ValueError):
            rd_loss(np.zeros((1, 20, 16, 3)), StubModel(np.zeros((1, 20, 16, 3)), 0), 0.01, RNG)

    def test_rate_gradient_reaches_analysis(self):
        m = ArcheModel(tiny_config(), seed=0)
        out = m.forward(Tensor(RNG.uniform(size=(1, 32, 32, 3))), np.random.default_rng(1))
        out.total_bits().backward()
        assert np.any(m.params["g_a.0.kernel"].grad != 0)

    def test_full_graph_gradient_sample(self):
        # finite differences on a tiny model, 1% of weights per tensor (at least one)
        m = ArcheModel(tiny_config(), seed=3)
        x = RNG.uniform(size=(1, 32, 32, 3))
        loss = rd_loss(x, m, 0.01, np.random.default_rng(4))
        loss.total.backward()

        def value():
            with T.no_grad():
                return rd_loss(x, m, 0.01, np.random.default_rng(4)).total.item()

        rng = np.random.default_rng(0)
        worst = 0.0
        for name in ("g_a.1.kernel", "g_s.2.kernel", "slice.2.param.1.kernel", "prior.z.matrix.1"):
            t = m.params[name]
            flat = t.data.reshape(-1)
            for i in rng.choice(t.size, size=max(1, t.size // 100), replace=False):
                old = flat[i]
                flat[i] = old + 1e-5
                up = value()
                flat[i] = old - 1e-5
                down = value()
                flat[i] = old
                num = (up - down) / 2e-5
                ana = t.grad.reshape(-1)[i]
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
        assert worst <= 1e-3


class TestAdam:
    def test_first_step(self):
        w = {"w": Tensor(np.zeros(3), True)}
        adam_step(w, {"w": np.ones(3)}, AdamState(), lr=1e-4)
        np.testing.assert_allclose(w["w"].data, -1e-4 / (1 + 1e-8), rtol=1e-12)
        assert w["w"].data[0] == pytest.approx(-9.99999e-5, rel=1e-6)

    def test_reference_oracle_several_steps(self):
        g_seq = RNG.normal(size=(5, 4))
        w = {"w": Tensor(np.ones(4), True)}
        state = AdamState()
        m = np.zeros(4)
        v = np.zeros(4)
        ref = np.ones(4)
        for t, g in enumerate(g_seq, start=1):
            adam_step(w, {"w": g}, state, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(w["w"].data, ref, rtol=1e-13)

    def test_zero_gradient_no_op(self):
        w = {"w": Tensor(RNG.normal(size=5), True)}
        before = w["w"].data.copy()
        state = AdamState()
        for _ in range(10):
            adam_step(w, {"w": np.zeros(5)}, state, lr=1e-3)
        np.testing.assert_array_equal(w["w"].data, before)

    def test_gamma_reprojected(self):
        gamma = Tensor(np.array([[0.001, 0.0], [0.0, 0.01]]), True)
        beta = Tensor(np.ones(2), True)
        p = GdnParams(beta, gamma)
        grads = {"gamma": np.array([[1.0, 0.0], [0.0, 0.0]])}
        adam_step({"gamma": gamma, "beta": beta}, grads, AdamState(), lr=0.011, gdn=[p])
        assert gamma.data[0, 0] == 0.0

    def test_state_records_round_trip(self):
        s = AdamState({"a": RNG.normal(size=3)}, {"a": RNG.uniform(size=3)}, 7)
        back = AdamState.from_records(s.to_records())
        assert back.t == 7
        assert back.m["a"].tobytes() == s.m["a"].tobytes() and back.v["a"].tobytes() == s.v["a"].tobytes()


def write_corpus(path, shapes, value=None):
    path.mkdir(exist_ok=True)
    for k, (h, w) in enumerate(shapes):
        img = np.full((h, w, 3), value, np.uint8) if value is not None else RNG.integers(0, 256, (h, w, 3), np.uint8)
        write_ppm(path / f"img{k}.ppm", img)


class TestCorpus:
    def test_crop_positions(self):
        assert crop_positions(512, 768, 256) == 257 * 513
        assert crop_positions(10, 10, 16) == 0

    def test_constant_crop(self, tmp_path):
        write_corpus(tmp_path / "c", [(70, 80)], value=128)
        crop = next(ingest_corpus(tmp_path / "c", crop_size=64))
        assert crop.shape == (64, 64, 3)
        assert np.all(crop == 128 / 255)

    def test_seeded_sequence(self, tmp_path):
        write_corpus(tmp_path / "c", [(90, 100), (64, 64), (80, 70)])
        a = [c for c, _ in zip(ingest_corpus(tmp_path / "c", 32, seed=5), range(12))]
        b = [c for c, _ in zip(ingest_corpus(tmp_path / "c", 32, seed=5), range(12))]
        c = [c for c, _ in zip(ingest_corpus(tmp_path / "c", 32, seed=6), range(12))]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_skips_small_and_malformed(self, tmp_path):
        write_corpus(tmp_path / "c", [(70, 70), (20, 90)])
        (tmp_path / "c" / "broken.ppm").write_bytes(b"P6\n12 12\n255\n\x00\x01")
        stats = CorpusStats()
        with pytest.warns(UserWarning):
            crops = ingest_corpus(tmp_path / "c", 64, stats=stats, epochs=1)
            out = list(crops)
        assert len(out) == 1
        assert (stats.loaded, stats.skipped_small, stats.malformed) == (1, 1, 1)

    def test_empty_corpus(self, tmp_path):
        (tmp_path / "e").mkdir()
        with pytest.raises(ValueError):
            next(ingest_corpus(tmp_path / "e", 64))


class TestTrainLoop:
    def config(self, tmp_path, steps, **changes):
        return TrainConfig(lmbda=0.01, batch_size=2, learning_rate=1e-3, steps=steps, crop_size=32,
                           seed=0, out_dir=str(tmp_path / "run"), checkpoint_every=2,
                           model=tiny_config(), **changes)

    def images(self):
        return [np.random.default_rng(i).integers(0, 256, (48, 48, 3)).astype(np.uint8) for i in range(3)]

    def test_zero_steps_is_init(self, tmp_path):
        res = train(self.config(tmp_path, 0), images=self.images())
        loaded, _, _ = load_checkpoint(res.checkpoint)
        init = ArcheModel(tiny_config(lmbda=0.01), seed=0)
        for k, t in init.params.items():
            assert loaded.params[k].data.tobytes() == t.data.tobytes()

    def test_trace_and_checkpoints(self, tmp_path):
        res = train(self.config(tmp_path, 3), images=self.images())
        with open(tmp_path / "run" / "trace.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "total", "rate_bpp", "mse"]
        assert len(rows) == 3 and all(math.isfinite(float(r["total"])) for r in rows)
        assert (tmp_path / "run" / "step000002.ckpt").exists()
        model, state, meta = resume(res.checkpoint)
        assert state.t == 3 and meta["step"] == 3
        for k in res.state.m:
            assert state.m[k].tobytes() == res.state.m[k].tobytes()
            assert state.v[k].tobytes() == res.state.v[k].tobytes()
        assert model.digest() == res.model.digest()

    def test_deterministic(self, tmp_path):
        a = train(self.config(tmp_path / "a", 2), images=self.images())
        b = train(self.config(tmp_path / "b", 2), images=self.images())
        assert a.model.digest() == b.model.digest()
        assert [r.total for r in a.trace] == [r.total for r in b.trace]

    def test_nan_aborts(self, tmp_path):
        m = ArcheModel(tiny_config(lmbda=0.01), seed=0)
        m.params["g_s.3.bias"].data[...] = np.nan
        with pytest.raises(TrainingDiverged, match="step 0"):
            train(self.config(tmp_path, 2), model=m, images=self.images())

    def test_needs_corpus(self):
        with pytest.raises(ValueError):
            train(TrainConfig(steps=1))
