import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from p2det import tensor as T
from p2det.prompt_encoder import (
    FourierMap,
    PointPrompt,
    PromptCapacityError,
    PromptLabel,
    encode_prompts,
    fourier_map,
    normalize_point,
)
from p2det.tensor import Tensor

uv = st.tuples(st.floats(-1, 1), st.floats(-1, 1))


@pytest.fixture
def fm():
    return FourierMap(m=8, sigma=1.0, seed=3)


class TestNormalize:
    def test_center(self):
        assert normalize_point(PointPrompt(255.5, 255.5), 512) == (0.0, 0.0)

    def test_boundaries(self):
        assert normalize_point(PointPrompt(-0.5, 511.5), 512) == (-1.0, 1.0)

    def test_quarter(self):
        u, _ = normalize_point(PointPrompt(127.5, 0), 512)
        assert u == pytest.approx(-0.5, abs=1e-15)

    @pytest.mark.parametrize("x,y", [(-1.0, 3.0), (3.0, 512.0)])
    def test_out_of_bounds(self, x, y):
        with pytest.raises(ValueError):
            normalize_point(PointPrompt(x, y), 512)


class TestFourierMap:
    def test_origin(self, fm):
        g = fourier_map((0.0, 0.0), fm)
        np.testing.assert_array_equal(g[0::2], 1.0)
        np.testing.assert_array_equal(g[1::2], 0.0)

    def test_single_frequency(self):
        g = fourier_map((1.0, 0.0), FourierMap.from_arrays([[0.5, 0.0]]))
        np.testing.assert_allclose(g, [-1.0, 0.0], atol=1e-15)

    @given(uv)
    def test_constant_norm(self, v):
        fm = FourierMap(m=6, seed=1)
        assert np.sum(fourier_map(v, fm) ** 2) == pytest.approx(6.0, abs=1e-12)

    @given(uv, uv)
    def test_lipschitz(self, v1, v2):
        fm = FourierMap(m=5, sigma=2.0, seed=9)
        lhs = np.linalg.norm(fourier_map(v1, fm) - fourier_map(v2, fm))
        rhs = 2 * math.pi * np.linalg.norm(fm.B) * np.linalg.norm(np.subtract(v1, v2)) * fm.a.max()
        assert lhs <= rhs + 1e-12

    def test_seeded_draw(self):
        a, b = FourierMap(4, 1.5, seed=7), FourierMap(4, 1.5, seed=7)
        np.testing.assert_array_equal(a.B, b.B)
        assert not np.array_equal(a.B, FourierMap(4, 1.5, seed=8).B)


class TestEncodePrompts:
    def emb(self, d, rng):
        return Tensor(rng.normal(size=(2, d)), requires_grad=True)

    def test_no_prompts_is_all_padding(self, fm, rng):
        te = self.emb(fm.dim, rng)
        tokens = encode_prompts([], fm, te, 4, 64).data
        np.testing.assert_array_equal(tokens, np.tile(te.data[PromptLabel.PADDING], (4, 1)))

    def test_center_prompt_with_zero_embedding(self, fm):
        te = Tensor(np.zeros((2, fm.dim)))
        tok = encode_prompts([PointPrompt(31.5, 31.5)], fm, te, 2, 64).data[0]
        np.testing.assert_allclose(tok, fourier_map((0.0, 0.0), fm), atol=1e-15)

    def test_capacity(self, fm, rng):
        with pytest.raises(PromptCapacityError):
            encode_prompts([PointPrompt(1, 1)] * 3, fm, self.emb(fm.dim, rng), 2, 64)

    def test_gradient_reaches_type_embeddings_only(self, fm, rng):
        te = self.emb(fm.dim, rng)
        B_before = fm.B.copy()
        out = encode_prompts([PointPrompt(10, 20), PointPrompt(40, 5)], fm, te, 4, 64)
        T.tsum(out * rng.normal(size=out.shape)).backward()
        assert te.grad is not None and np.any(te.grad != 0)
        np.testing.assert_array_equal(fm.B, B_before)
        err = T.grad_check(lambda t: T.tsum(encode_prompts([PointPrompt(10, 20)], fm, t, 3, 64) ** 2), Tensor(te.data.copy()))
        assert err < 1e-6

    def test_deterministic(self, fm, rng):
        te = self.emb(fm.dim, rng)
        ps = [PointPrompt(3.0, 4.0), PointPrompt(50.0, 60.0)]
        a = encode_prompts(ps, FourierMap(8, seed=3), te, 4, 64).data
        b = encode_prompts(ps, FourierMap(8, seed=3), te, 4, 64).data
        assert a.tobytes() == b.tobytes()

    def test_permutation(self, fm, rng):
        te = self.emb(fm.dim, rng)
        ps = [PointPrompt(3.0, 4.0), PointPrompt(50.0, 60.0), PointPrompt(20.0, 9.0)]
        a = encode_prompts(ps, fm, te, 3, 64).data
        b = encode_prompts([ps[2], ps[0], ps[1]], fm, te, 3, 64).data
        np.testing.assert_array_equal(b, a[[2, 0, 1]])
