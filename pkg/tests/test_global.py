import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiface.global_agg import AggregateOp, GlobalHeadOp, aggregate, global_head, pool
from multiface.numeric import grad_check

I2 = np.eye(2)
Z2 = np.zeros(2)


class TestAggregate:
    def test_single_face_identity(self):
        assert np.array_equal(aggregate([[0.3, -0.7]], I2, Z2), [0.3, -0.7])

    def test_mean(self):
        assert np.array_equal(aggregate([[1.0, 0.0], [0.0, 1.0]], I2, Z2), [0.5, 0.5])

    def test_affine(self):
        assert np.array_equal(aggregate([[1.0, 0.0], [0.0, 1.0]], 2 * I2, np.ones(2)), [2.0, 2.0])

    def test_max(self):
        assert np.array_equal(aggregate([[1.0, -3.0], [0.0, 1.0]], I2, Z2, kind="max"), [1.0, 1.0])

    def test_empty_image(self):
        with pytest.raises(ValueError):
            pool(np.zeros((0, 3)))

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.sampled_from(["mean", "max"]))
    def test_face_order_does_not_matter(self, seed, n, kind):
        rng = np.random.default_rng(seed)
        faces = rng.standard_normal((n, 5))
        Wc, bc = rng.standard_normal((5, 4)), rng.standard_normal(4)
        perm = rng.permutation(n)
        assert np.array_equal(aggregate(faces[perm], Wc, bc, kind), aggregate(faces, Wc, bc, kind))

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.sampled_from(["mean", "max"]))
    def test_duplicating_faces_keeps_pool(self, seed, n, kind):
        rng = np.random.default_rng(seed)
        faces = rng.standard_normal((n, 5))
        assert np.allclose(pool(np.vstack([faces, faces]), kind), pool(faces, kind), rtol=0, atol=1e-14)

    @pytest.mark.parametrize("kind", ["mean", "max"])
    def test_gradient(self, kind):
        rng = np.random.default_rng(0)
        for _ in range(5):
            inputs = [rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)]
            assert grad_check(AggregateOp(kind), inputs, rng=rng) < 1e-4


class TestGlobalHead:
    def test_zero_params(self):
        assert global_head(np.array([0.4, -1.0]), np.zeros((2, 2)), Z2, np.zeros((2, 1)), np.zeros(1)) == 0.5

    def test_hand_trace(self):
        z = [0.5, -1.0]
        W1 = [[1.0, -2.0], [0.5, 0.25]]
        b1 = [0.1, 0.2]
        W2 = [1.5, -0.5]
        b2 = -0.3
        # hidden_j = relu(z0*W1[0][j] + z1*W1[1][j] + b1[j])
        h0 = max(0.0, 0.5 * 1.0 + -1.0 * 0.5 + 0.1)       # 0.1
        h1 = max(0.0, 0.5 * -2.0 + -1.0 * 0.25 + 0.2)     # relu(-1.05) = 0
        want = 1 / (1 + math.exp(-(h0 * 1.5 + h1 * -0.5 + b2)))
        got = global_head(np.array(z), np.array(W1), np.array(b1), np.array(W2)[:, None], np.array([b2]))
        assert got == pytest.approx(want, abs=1e-15)
        assert got == pytest.approx(1 / (1 + math.exp(0.15)), abs=1e-15)

    def test_face_permutation_leaves_prediction(self):
        rng = np.random.default_rng(1)
        faces = rng.standard_normal((5, 4))
        params = (rng.standard_normal((4, 4)), rng.standard_normal(4))
        head = (rng.standard_normal((4, 3)), rng.standard_normal(3), rng.standard_normal((3, 1)), rng.standard_normal(1))
        a = global_head(aggregate(faces, *params), *head)
        b = global_head(aggregate(faces[::-1], *params), *head)
        assert a == b

    def test_gradient(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            inputs = [rng.standard_normal(5), rng.standard_normal((5, 6)), rng.standard_normal(6),
                      rng.standard_normal((6, 1)), rng.standard_normal(1)]
            assert grad_check(GlobalHeadOp(), inputs, rng=rng) < 1e-4
