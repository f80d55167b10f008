import numpy as np
import pytest

from multiface.checks import CASES, run_gradcheck, tiny_batch, tiny_config
from multiface.model import expected_shapes, forward_backward, init_params, local_features, predict
from multiface.simmat import build_groups


@pytest.mark.parametrize("name", [n for n in CASES if n.startswith("model")])
def test_whole_model_gradient(name):
    assert run_gradcheck(name, seed=1, points=1).max_rel_err < 1e-4


def test_init_shapes_match_expected():
    cfg = tiny_config()
    params = init_params(cfg, 6)
    assert {k: v.shape for k, v in params.items()} == expected_shapes(cfg, 6)
    assert np.array_equal(params["expand.w"], np.ones(cfg.channels))
    assert np.all(params["expand.b"] == 0)


@pytest.mark.parametrize("changes", [{}, {"no_sm": True}, {"metric_input": "backbone", "global_input": "backbone"}])
def test_slot_shuffle_moves_features_with_faces(changes):
    rng = np.random.default_rng(0)
    batch = tiny_batch(rng, sizes=(2, 3))
    cfg = tiny_config(**changes)
    params = init_params(cfg, 6)
    plain = build_groups(batch, cfg.group_size)[0]
    shuffled = build_groups(batch, cfg.group_size, seed=4)[0]
    fa, fb = local_features(params, plain, cfg), local_features(params, shuffled, cfg)
    pos = {ref: i for i, ref in enumerate(shuffled.member_refs) if ref is not None}
    for i, ref in enumerate(plain.member_refs):
        if ref is not None:
            assert np.array_equal(fa[i], fb[pos[ref]])


def test_predict_matches_batch_forward():
    rng = np.random.default_rng(1)
    batch = tiny_batch(rng, sizes=(2, 3, 2))
    cfg = tiny_config()
    params = init_params(cfg, 6)
    res = forward_backward(params, batch, cfg, need_grad=False)
    face_scores, image_scores = predict(params, batch, cfg)
    assert np.array_equal(image_scores, res.image_scores)
    for a, b in zip(face_scores, res.face_scores):
        assert np.array_equal(a, b)
        assert np.all((a > 0) & (a < 1))


def test_breakdown_is_weighted_sum():
    rng = np.random.default_rng(2)
    batch = tiny_batch(rng, sizes=(3, 2))
    cfg = tiny_config()
    b = forward_backward(init_params(cfg, 6), batch, cfg, need_grad=False).breakdown
    assert b.L_total == b.L_global + 1.0 * b.L_local + 4.0 * b.L_pull + 1.0 * b.L_push
