import numpy as np
import pytest

from p2det import tensor as T
from p2det.fusion import (
    attention,
    encode_image,
    fuse,
    init_attention,
    init_image_encoder,
    init_two_way_block,
    scaled_dot_attention,
    two_way_block,
)
from p2det.prompt_encoder import FourierMap, grid_positional_encoding
from p2det.tensor import Tensor, grad_check

D, HEADS = 8, 2


@pytest.fixture
def prng():
    return np.random.Generator(np.random.PCG64(21))


def zero_params(params):
    return {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}


class TestAttention:
    def test_single_key_returns_its_value(self, rng):
        v = Tensor(rng.normal(size=(1, 4)))
        out = scaled_dot_attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), v)
        np.testing.assert_allclose(out.data, np.tile(v.data, (3, 1)), atol=1e-15)

    def test_identical_keys_average_values(self, rng):
        k = Tensor(np.tile(rng.normal(size=(1, 4)), (2, 1)))
        v = Tensor(np.array([[1.0, 2.0, 3.0, 4.0], [3.0, 2.0, 1.0, 0.0]]))
        out = scaled_dot_attention(Tensor(rng.normal(size=(5, 4))), k, v)
        np.testing.assert_allclose(out.data, np.tile([2.0, 2.0, 2.0, 2.0], (5, 1)), atol=1e-14)

    def test_weights_are_convex(self, rng, prng):
        p = init_attention(prng, D, "a")
        _, w = attention(Tensor(rng.normal(size=(3, D))), Tensor(rng.normal(size=(7, D))), Tensor(rng.normal(size=(7, D))),
                         p, "a", HEADS, return_weights=True)
        assert w.shape == (HEADS, 3, 7)
        assert np.all(w.data >= 0)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_head_divisibility(self, rng, prng):
        p = init_attention(prng, D, "a")
        x = Tensor(rng.normal(size=(2, D)))
        with pytest.raises(ValueError):
            attention(x, x, x, p, "a", 3)

    def test_cross_attention_gradients(self, rng, prng):
        p = init_attention(prng, D, "a")
        kv = Tensor(rng.normal(size=(8, D)))
        r = rng.normal(size=(8, D))
        assert grad_check(lambda t: T.tsum(attention(t, kv, kv, p, "a", HEADS) * r), Tensor(rng.normal(size=(8, D)))) < 1e-4


class TestImageEncoder:
    def test_grid_shape(self, prng):
        fm = FourierMap(D // 2)
        p = init_image_encoder(prng, D, 8, 2)
        emb = encode_image(Tensor(np.zeros((1, 64, 64))), p, fm, 8, 2, HEADS)
        assert emb.grid.shape == (D, 8, 8)
        assert emb.positional_encoding.shape == (D, 8, 8)

    def test_zero_image_zero_params_leaves_positional_pathway(self, prng):
        fm = FourierMap(D // 2, seed=4)
        p = zero_params(init_image_encoder(prng, D, 4, 2))
        p["encoder.neck.w"] = Tensor(np.eye(D))
        emb = encode_image(Tensor(np.zeros((1, 16, 16))), p, fm, 4, 2, HEADS)
        np.testing.assert_allclose(emb.grid.data, grid_positional_encoding(fm, 4, 4).T.reshape(D, 4, 4), atol=1e-15)

    def test_indivisible(self, prng):
        with pytest.raises(ValueError):
            encode_image(Tensor(np.zeros((1, 10, 16))), init_image_encoder(prng, D, 4, 1), FourierMap(D // 2), 4, 1, HEADS)

    def test_two_layer_gradients(self, rng, prng):
        fm = FourierMap(D // 2)
        p = init_image_encoder(prng, D, 4, 2)
        r = rng.normal(size=(D, 4, 4))
        err = grad_check(lambda t: T.tsum(encode_image(t, p, fm, 4, 2, HEADS).grid * r), Tensor(rng.normal(size=(1, 16, 16))))
        assert err < 1e-4


class TestTwoWayBlock:
    def streams(self, rng, n=4, L=16):
        return (Tensor(rng.normal(size=(n, D))), Tensor(rng.normal(size=(L, D))),
                Tensor(rng.normal(size=(n, D))), Tensor(rng.normal(size=(L, D))))

    def test_zero_everything(self, prng):
        p = zero_params(init_two_way_block(prng, D, "b"))
        z = lambda n: Tensor(np.zeros((n, D)))
        tok, img = two_way_block(z(4), z(16), z(4), z(16), p, "b", HEADS, grid_hw=(4, 4))
        assert np.all(tok.data == 0) and np.all(img.data == 0)

    def test_shapes_preserved(self, rng, prng):
        q, k, pq, pk = self.streams(rng)
        tok, img = two_way_block(q, k, pq, pk, init_two_way_block(prng, D, "b"), "b", HEADS, grid_hw=(4, 4))
        assert tok.shape == q.shape and img.shape == k.shape

    @pytest.mark.parametrize("pe_in_values", [False, True])
    def test_token_permutation_equivariance(self, rng, prng, pe_in_values):
        q, k, pq, pk = self.streams(rng)
        p = init_two_way_block(prng, D, "b")
        perm = [1, 0, 2, 3]
        tok, img = two_way_block(q, k, pq, pk, p, "b", HEADS, grid_hw=(4, 4), pe_in_values=pe_in_values)
        tok2, img2 = two_way_block(Tensor(q.data[perm]), k, Tensor(pq.data[perm]), pk, p, "b", HEADS, grid_hw=(4, 4),
                                   pe_in_values=pe_in_values)
        np.testing.assert_allclose(tok2.data, tok.data[perm], atol=1e-12)
        np.testing.assert_allclose(img2.data, img.data, atol=1e-12)

    def test_width_mismatch(self, rng, prng):
        p = init_two_way_block(prng, D, "b")
        with pytest.raises(ValueError):
            two_way_block(Tensor(np.zeros((2, D))), Tensor(np.zeros((4, D + 2))), Tensor(np.zeros((2, D))),
                          Tensor(np.zeros((4, D + 2))), p, "b", HEADS, grid_hw=(2, 2))

    def test_gradients_4_tokens_16_cells(self, rng, prng):
        q, k, pq, pk = self.streams(rng)
        p = init_two_way_block(prng, D, "b")
        r1, r2 = rng.normal(size=(4, D)), rng.normal(size=(16, D))

        def f(t):
            tok, img = two_way_block(t, k, pq, pk, p, "b", HEADS, grid_hw=(4, 4))
            return T.tsum(tok * r1) + T.tsum(img * r2)

        assert grad_check(f, Tensor(q.data.copy())) < 1e-4


class TestFuse:
    def setup_parts(self, prng, rng, depth, size=16, patch=4):
        fm = FourierMap(D // 2, seed=2)
        p = init_image_encoder(prng, D, patch, 1)
        for i in range(depth):
            p.update(init_two_way_block(prng, D, f"fusion.block{i}"))
        emb = encode_image(Tensor(rng.normal(size=(1, size, size))), p, fm, patch, 1, HEADS)
        sparse = Tensor(rng.normal(size=(3, D)))
        return p, emb, sparse

    def test_depth_zero_is_upsampled_embedding(self, prng, rng):
        p, emb, sparse = self.setup_parts(prng, rng, 0)
        out = fuse(sparse, emb, p, 0, HEADS, (16, 16))
        np.testing.assert_allclose(out.data, T.bilinear_upsample(emb.grid, 16, 16).data, atol=1e-14)

    @pytest.mark.parametrize("size,patch", [(16, 4), (32, 8), (24, 8)])
    def test_output_matches_input_resolution(self, prng, rng, size, patch):
        p, emb, sparse = self.setup_parts(prng, rng, 2, size, patch)
        assert fuse(sparse, emb, p, 2, HEADS, (size, size)).shape == (D, size, size)

    def test_token_permutation_invariance_of_map(self, prng, rng):
        p, emb, sparse = self.setup_parts(prng, rng, 2)
        a = fuse(sparse, emb, p, 2, HEADS, (16, 16)).data
        b = fuse(Tensor(sparse.data[[2, 0, 1]]), emb, p, 2, HEADS, (16, 16)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_end_to_end_gradients(self, prng, rng):
        p, emb, sparse = self.setup_parts(prng, rng, 1, 8, 4)
        r = rng.normal(size=(D, 8, 8))
        assert grad_check(lambda t: T.tsum(fuse(t, emb, p, 1, HEADS, (8, 8)) * r), Tensor(sparse.data.copy())) < 1e-4
