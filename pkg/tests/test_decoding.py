import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcseg import tensor as T
from hcseg.clustering import AssignmentMatrix, compute_assignment_local, harden_assignment
from hcseg.decoding import (CLASS, MASK, MaskStack, cluster_ids, decode_full, decode_step, hard_decode,
                            upsample_to_image, upsample_values)
from hcseg.gradcheck import check_gradients
from hcseg.tensor import DimensionError, Tensor


def random_chain(rng, coarse=(1, 1), levels=3, c=3, scale=0.3):
    """Windowed assignments ordered finest first, and the coarsest grid."""
    chain = []
    hd, wd = coarse
    for lv in reversed(range(levels)):
        q = rng.normal(size=(c, 4 * hd * wd))
        k = rng.normal(size=(c, hd * wd))
        q, k = q / np.linalg.norm(q, axis=0), k / np.linalg.norm(k, axis=0)
        chain.append(compute_assignment_local(Tensor(q), Tensor(k), scale, (2 * hd, 2 * wd), (hd, wd), level=lv))
        hd, wd = 2 * hd, 2 * wd
    return chain[::-1], coarse


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for t in range(a.shape[1]):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestDecodeStep:
    def test_identity(self, rng):
        m = rng.random((5, 3))
        a = AssignmentMatrix(Tensor(np.eye(5)), "dense", (5, 1), (5, 1))
        np.testing.assert_array_equal(decode_step(a, MaskStack(Tensor(m), (5, 1))).values.data, m)

    def test_one_hot_copies(self, rng):
        parent = rng.integers(0, 2, size=8)
        a = AssignmentMatrix(Tensor(np.eye(2)[parent]), "dense", (8, 1), (2, 1))
        m = rng.random((2, 3))
        np.testing.assert_array_equal(decode_step(a, MaskStack(Tensor(m), (2, 1))).values.data, m[parent])

    def test_random_against_triple_loop(self, rng):
        a = rng.dirichlet(np.ones(2), size=8)
        m = rng.random((2, 3))
        out = decode_step(AssignmentMatrix(Tensor(a), "dense", (8, 1), (2, 1)), MaskStack(Tensor(m), (2, 1)))
        np.testing.assert_allclose(out.values.data, naive_matmul(a, m), atol=1e-15)

    def test_mismatch(self, rng):
        a = AssignmentMatrix(Tensor(np.eye(4)), "dense", (4, 1), (4, 1))
        with pytest.raises(DimensionError):
            decode_step(a, MaskStack(Tensor(np.ones((3, 2))), (3, 1)))

    @pytest.mark.parametrize("hd,wd", [(1, 1), (2, 3), (8, 8), (16, 16)])
    def test_windowed_equals_dense(self, rng, hd, wd):
        chain, _ = random_chain(rng, (hd, wd), levels=1)
        a = chain[0]
        m = rng.random((hd * wd, 4))
        win = decode_step(a, MaskStack(Tensor(m), (hd, wd))).values.data
        dense = naive_matmul(a.to_dense(), m) if hd * wd <= 4 else a.to_dense() @ m
        assert np.abs(win - dense).max() <= 1e-10
        assert win.shape == (4 * hd * wd, 4)


class TestDecodeFull:
    def test_empty_chain(self, rng):
        m = MaskStack(Tensor(rng.random((4, 2))), (2, 2))
        assert decode_full([], m) is m

    def test_two_one_hot_levels_copy_ancestor(self, rng):
        chain, coarse = random_chain(rng, (1, 1), levels=2, scale=1e-4)
        hard = [AssignmentMatrix(Tensor(np.round(a.weights.data)), a.layout, a.fine_shape, a.coarse_shape,
                                 a.level) for a in chain]
        m = rng.random((1, 3))
        out = decode_full(hard, MaskStack(Tensor(m), coarse)).values.data
        np.testing.assert_array_equal(out, np.tile(m, (16, 1)))

    def test_associativity_oracle(self, rng):
        chain, coarse = random_chain(rng, (2, 1), levels=3)
        m = rng.random((2, 3))
        prod = chain[0].to_dense() @ (chain[1].to_dense() @ chain[2].to_dense())
        out = decode_full(chain, MaskStack(Tensor(m), coarse)).values.data
        np.testing.assert_allclose(out, prod @ m, atol=1e-12)

    def test_non_consecutive_levels(self, rng):
        chain, coarse = random_chain(rng, (1, 1), levels=3)
        with pytest.raises(DimensionError):
            decode_full([chain[0], chain[2]], MaskStack(Tensor(rng.random((1, 2))), coarse))

    def test_class_rows_stay_stochastic_at_every_level(self, rng):
        chain, coarse = random_chain(rng, (2, 2), levels=3)
        m = MaskStack(Tensor(rng.dirichlet(np.ones(5), size=4)), coarse, CLASS)
        for a in reversed(chain):
            m = decode_step(a, m)
            np.testing.assert_allclose(m.values.data.sum(axis=1), 1.0, atol=1e-6)
            assert m.semantics == CLASS

    @given(st.integers(0, 2 ** 31 - 1))
    def test_mask_range_preserved(self, seed):
        rng = np.random.default_rng(seed)
        chain, coarse = random_chain(rng, (1, 2), levels=2)
        out = decode_full(chain, MaskStack(Tensor(rng.random((2, 3))), coarse, MASK)).values.data
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_gradients(self, rng):
        m = T.parameter(rng.random((4, 2)))
        r = rng.normal(size=(64, 2))
        q0, k0 = T.parameter(rng.normal(size=(3, 16))), T.parameter(rng.normal(size=(3, 4)))
        q1, k1 = T.parameter(rng.normal(size=(3, 64))), T.parameter(rng.normal(size=(3, 16)))
        s = T.parameter(np.array(0.4))

        def f():
            fine = compute_assignment_local(q1, k1, s, (8, 8), (4, 4), level=0)
            coarse = compute_assignment_local(q0, k0, s, (4, 4), (2, 2), level=1)
            return (decode_full([fine, coarse], MaskStack(m, (2, 2))).values * r).sum()

        errs = check_gradients(f, {"m": m, "q0": q0, "k0": k0, "q1": q1, "k1": k1, "s": s})
        assert max(errs.values()) <= 1e-5, errs


def tree_walk_decode(chain, m):
    """Follow each finest pixel's argmax parent up the tree and copy that prototype's row."""
    out = []
    for n in range(chain[0].num_fine):
        node = n
        for a in chain:
            node = int(np.argmax(a.to_dense()[node]))
        out.append(m[node])
    return np.array(out)


class TestHardDecode:
    def test_matches_tree_walk(self, rng):
        chain, coarse = random_chain(rng, (2, 2), levels=2)
        m = rng.random((4, 3))
        out = hard_decode(chain, MaskStack(Tensor(m), coarse)).values.data
        np.testing.assert_array_equal(out, tree_walk_decode(chain, m))

    def test_equals_soft_when_already_one_hot(self, rng):
        chain, coarse = random_chain(rng, (1, 1), levels=2)
        hard = [harden_assignment(a) for a in chain]
        m = MaskStack(Tensor(rng.random((1, 3))), coarse)
        np.testing.assert_array_equal(hard_decode(hard, m).values.data, decode_full(hard, m).values.data)

    def test_at_most_coarse_many_distinct_rows(self, rng):
        chain, coarse = random_chain(rng, (2, 3), levels=2)
        out = hard_decode(chain, MaskStack(Tensor(rng.random((6, 4))), coarse)).values.data
        assert len(np.unique(out, axis=0)) <= 6

    def test_cluster_ids_agree_with_hard_decode(self, rng):
        chain, coarse = random_chain(rng, (2, 2), levels=2)
        ids = cluster_ids(chain)
        m = np.arange(4.0)[:, None]
        out = hard_decode(chain, MaskStack(Tensor(m), coarse)).values.data[:, 0]
        np.testing.assert_array_equal(ids.reshape(-1), out.astype(int))

    def test_cluster_ids_partial_depth_and_upsampling(self, rng):
        chain, coarse = random_chain(rng, (2, 2), levels=2)
        ids0 = cluster_ids(chain, upto=0)
        assert ids0.shape == (8, 8) and ids0.max() < 16
        big = cluster_ids(chain, image_shape=(16, 16))
        np.testing.assert_array_equal(big[::2, ::2], cluster_ids(chain))


class TestUpsample:
    def test_stride_one_identity(self, rng):
        m = MaskStack(Tensor(rng.random((16, 2))), (4, 4))
        np.testing.assert_array_equal(upsample_to_image(m, (4, 4)).values.data, m.values.data)

    def test_stride_four_blocks(self, rng):
        v = rng.random((4, 1))
        out = upsample_to_image(MaskStack(Tensor(v), (2, 2)), (8, 8)).values.data.reshape(8, 8)
        for by in range(2):
            for bx in range(2):
                assert np.all(out[4 * by:4 * by + 4, 4 * bx:4 * bx + 4] == v[2 * by + bx, 0])

    def test_pixel_loop_oracle(self, rng):
        v = rng.random((2 * 3, 2))
        out = upsample_values(Tensor(v), (2, 3), (6, 12)).data.reshape(6, 12, 2)
        for y in range(6):
            for x in range(12):
                np.testing.assert_array_equal(out[y, x], v[(y // 3) * 3 + x // 4])

    def test_not_divisible(self, rng):
        with pytest.raises(DimensionError):
            upsample_to_image(MaskStack(Tensor(rng.random((4, 1))), (2, 2)), (5, 4))

    def test_gradient(self, rng):
        v = T.parameter(rng.random((4, 2)))
        r = rng.normal(size=(64, 2))
        errs = check_gradients(lambda: (upsample_values(v, (2, 2), (8, 8)) * r).sum(), {"v": v})
        assert max(errs.values()) <= 1e-5
