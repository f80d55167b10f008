import math

import numpy as np
import pytest

from multiface.checks import tiny_batch, tiny_config
from multiface.config import TrainConfig
from multiface.dataset import SyntheticConfig, gen_synthetic
from multiface.model import expected_shapes, forward_backward, init_params
from multiface.trainer import (
    AdamState, CheckpointError, adam_step, clip_gradients, load_checkpoint, save_checkpoint, train,
)

SMALL = dict(epochs=2, d_model=16, d_ff=32, heads=2, channels=4, group_size=20, global_hidden=8)


@pytest.fixture(scope="module")
def small_data():
    return gen_synthetic(SyntheticConfig(num_images=60, feature_dim=8), seed=1)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        st = AdamState(lr=1e-4)
        adam_step(p, {"w": np.zeros(2)}, st)
        assert np.array_equal(p["w"], [1.0, -2.0]) and st.t == 1

    def test_first_step(self):
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(lr=1e-4))
        # m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert p["w"][0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_two_steps(self):
        p = {"w": np.array([0.0])}
        st = AdamState(lr=1e-4)
        trail = [0.0]
        for _ in range(2):
            adam_step(p, {"w": np.array([1.0])}, st)
            trail.append(p["w"][0])
        steps = np.diff(trail)
        assert np.all((steps > -1e-4 - 1e-12) & (steps < 0))
        assert trail[0] > trail[1] > trail[2]

    def test_oracle_recurrence(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal(5)
        p = {"w": np.zeros(1)}
        st = AdamState(lr=0.01)
        m = v = theta = 0.0
        for t, gt in enumerate(g, start=1):
            adam_step(p, {"w": np.array([gt])}, st)
            m = 0.9 * m + 0.1 * gt
            v = 0.999 * v + 0.001 * gt * gt
            theta -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert p["w"][0] == pytest.approx(theta, rel=1e-12, abs=1e-15)

    def test_nan_gradient_names_param(self):
        with pytest.raises(ValueError, match="enc.Wq"):
            adam_step({"enc.Wq": np.zeros(2)}, {"enc.Wq": np.array([np.nan, 0.0])}, AdamState(lr=1e-4))

    def test_clipping(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_gradients(g, 1.0) == 5.0
        assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
        g = {"a": np.array([0.3])}
        clip_gradients(g, 1.0)
        assert g["a"][0] == 0.3


class TestCheckpoint:
    def _save(self, path, cfg=None):
        cfg = cfg or TrainConfig(**SMALL)
        params = init_params(cfg, 8)
        st = AdamState(lr=cfg.lr)
        adam_step(params, {k: np.ones_like(v) for k, v in params.items()}, st)
        save_checkpoint(params, st, cfg, path, feature_dim=8, epoch=3)
        return cfg, params

    def test_round_trip_is_byte_identical(self, tmp_path):
        cfg, params = self._save(tmp_path / "a.ckpt")
        ck = load_checkpoint(tmp_path / "a.ckpt")
        assert ck.config == cfg and ck.epoch == 3 and ck.feature_dim == 8 and ck.state.t == 1
        for k, v in params.items():
            assert np.array_equal(ck.params[k], v.astype(np.float32))
        save_checkpoint(ck.params, ck.state, ck.config, tmp_path / "b.ckpt", ck.feature_dim, ck.epoch)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path):
        self._save(tmp_path / "a.ckpt")
        raw = bytearray((tmp_path / "a.ckpt").read_bytes())
        raw[:4] = b"NOPE"
        (tmp_path / "a.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "a.ckpt")

    def test_truncated(self, tmp_path):
        self._save(tmp_path / "a.ckpt")
        raw = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "a.ckpt").write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "a.ckpt")

    def test_shape_mismatch_names_tensor(self, tmp_path):
        self._save(tmp_path / "a.ckpt")
        other = TrainConfig(**{**SMALL, "d_model": 32})
        with pytest.raises(CheckpointError, match=r"tokens\.proj"):
            load_checkpoint(tmp_path / "a.ckpt", config=other)


class TestTrain:
    def test_determinism(self, small_data, tmp_path):
        cfg = TrainConfig(**SMALL)
        for run in ("a", "b"):
            (tmp_path / run).mkdir()
            train(small_data, cfg, out_ckpt=tmp_path / run / "m.ckpt", log_path=tmp_path / run / "log.csv")
        for name in ("m.ckpt", "m.e01.ckpt", "m.e02.ckpt", "log.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_result(self, small_data, tmp_path):
        train(small_data, TrainConfig(**SMALL), out_ckpt=tmp_path / "a.ckpt")
        train(small_data, TrainConfig(**{**SMALL, "seed": 1}), out_ckpt=tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() != (tmp_path / "b.ckpt").read_bytes()

    def test_log_has_one_row_per_epoch(self, small_data, tmp_path):
        train(small_data, TrainConfig(**SMALL), log_path=tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0].split(",")[:2] == ["epoch", "L_total"] and len(lines) == 3

    def test_loss_decreases_over_first_epochs(self):
        data = gen_synthetic(SyntheticConfig(num_images=200, sigma=0.1, theta=math.pi / 2), seed=21)
        val = gen_synthetic(SyntheticConfig(num_images=40), seed=22)
        res = train(data, TrainConfig(epochs=5), val=val)
        losses = [row["L_total"] for row in res.history]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_no_sm_has_no_similarity_parameters(self):
        shapes = expected_shapes(TrainConfig(no_sm=True), 32)
        assert "expand.w" not in shapes and shapes["tokens.proj"] == (32, 128)


class TestAblationWiring:
    """Each flag must cut its term's gradient to exactly zero."""

    def _grads(self, **changes):
        rng = np.random.default_rng(5)
        batch = tiny_batch(rng, sizes=(3, 2, 3, 2))
        cfg = tiny_config(**changes)
        return forward_backward(init_params(cfg, 6), batch, cfg).grads

    @pytest.mark.parametrize("flag,others", [
        ("no_pull", dict(lambda_local=0.0, no_global=True, no_push=True)),
        ("no_push", dict(lambda_local=0.0, no_global=True, no_pull=True)),
        ("no_global", dict(lambda_local=0.0, no_pull=True, no_push=True)),
    ])
    def test_only_term_removed_gives_zero_gradient(self, flag, others):
        live = self._grads(**others)
        assert any(np.any(g != 0) for g in live.values())
        dead = self._grads(**others, **{flag: True})
        assert all(np.all(g == 0) for g in dead.values())

    def test_no_global_leaves_head_untouched(self):
        grads = self._grads(no_global=True)
        assert all(np.all(grads[k] == 0) for k in grads if k.startswith("global."))
        assert np.any(grads["enc.Wv"] != 0)
