import numpy as np
import pytest

from canonseg import groups as G


def rep_matrix(g: G.GroupElement) -> np.ndarray:
    """Integer 2x2 representation: pixel-moving maps of rot90 and vertical-axis flip."""
    rot = np.array([[0, -1], [1, 0]])
    flip = np.diag([1, -1])
    m = np.linalg.matrix_power(rot, g.rotation)
    if g.reflected:
        m = flip @ m
    return m


class TestD4Algebra:
    def test_rotation_addition(self):
        r1 = G.GroupElement(4, 1)
        assert G.compose(r1, r1) == G.GroupElement(4, 2)

    def test_reflection_is_involution(self):
        f = G.GroupElement(4, 0, True)
        assert G.compose(f, f) == G.identity(4)

    def test_cayley_table_matches_matrix_oracle(self):
        for a in G.elements(4):
            for b in G.elements(4):
                assert np.array_equal(rep_matrix(G.compose(a, b)), rep_matrix(a) @ rep_matrix(b))

    def test_inverses(self):
        for g in G.elements(4) + G.elements(8):
            assert G.compose(g, G.inverse(g)) == G.identity(g.n)
            assert G.compose(G.inverse(g), g) == G.identity(g.n)

    def test_associativity_exhaustive_d4(self):
        els = G.elements(4)
        for a in els:
            for b in els:
                for c in els:
                    assert G.compose(G.compose(a, b), c) == G.compose(a, G.compose(b, c))

    def test_closure_and_identity(self):
        els = G.elements(4)
        idx = {g.index for g in els}
        assert idx == set(range(8))
        e = G.identity(4)
        assert e.index == 0
        for g in els:
            assert G.compose(e, g) == g and G.compose(g, e) == g

    def test_order_mismatch(self):
        with pytest.raises(G.GroupOrderMismatch):
            G.compose(G.identity(4), G.identity(8))


class TestD4Action:
    def test_identity_bit_exact(self, rng):
        a = G.GroupAction(4)
        x = rng.normal(size=(3, 6, 6)).astype(np.float32)
        assert a.act(G.identity(4), x).tobytes() == np.ascontiguousarray(x).tobytes()

    def test_r90_counter_clockwise(self):
        a = G.GroupAction(4)
        out = a.act(G.GroupElement(4, 1), np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(out, [[2.0, 4.0], [1.0, 3.0]])

    def test_flip_about_vertical_axis(self):
        a = G.GroupAction(4)
        out = a.act(G.GroupElement(4, 0, True), np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(out, [[2.0, 1.0], [4.0, 3.0]])

    def test_inverse_cancellation_all_elements(self, rng):
        a = G.GroupAction(4)
        x = rng.normal(size=(2, 8, 8)).astype(np.float32)
        for g in G.elements(4):
            assert np.array_equal(a.act(g, a.act(G.inverse(g), x)), x)

    def test_action_homomorphism_bit_exact(self, rng):
        a = G.GroupAction(4)
        x = rng.normal(size=(8, 8)).astype(np.float32)
        for g1 in G.elements(4):
            for g2 in G.elements(4):
                lhs = a.act(g1, a.act(g2, x))
                rhs = a.act(G.compose(g1, g2), x)
                assert np.array_equal(lhs, rhs)

    def test_mask_histogram_preserved(self, rng):
        a = G.GroupAction(4)
        mask = (rng.random((10, 10)) < 0.3).astype(np.uint8)
        for g in G.elements(4):
            out = a.act(g, mask, mask=True)
            assert np.array_equal(np.bincount(out.ravel(), minlength=2), np.bincount(mask.ravel(), minlength=2))

    def test_non_square_rejected(self):
        with pytest.raises(G.NonSquareImage):
            G.GroupAction(4).act(G.identity(4), np.ones((3, 4)))


class TestRandomElement:
    def test_deterministic_per_seed(self):
        assert G.random_element(4, 77) == G.random_element(4, 77)

    def test_d8_index_range(self):
        g = G.random_element(8, 5)
        assert 0 <= g.index < 16

    def test_uniformity_chi2(self):
        rng = np.random.default_rng(9)
        n_draws = 100_000
        counts = np.zeros(8)
        for _ in range(n_draws):
            counts[G.random_element(4, rng).index] += 1
        expected = n_draws / 8
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # chi-square with 7 dof: p > 0.01 iff statistic < 18.48
        assert chi2 < 18.48


class TestD8Action:
    @staticmethod
    def smooth_bump(n=128, radius=52.0):
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        r = np.sqrt((ii - (n - 1) / 2) ** 2 + (jj - (n - 1) / 2) ** 2)
        return np.where(r < radius, np.cos(np.pi * r / (2 * radius)) ** 2, 0.0)

    def test_identity_exact(self):
        a = G.GroupAction(8)
        x = self.smooth_bump(32, 12.0)
        assert np.array_equal(a.act(G.identity(8), x), x)

    def test_even_rotations_exact(self, rng):
        a = G.GroupAction(8)
        x = rng.normal(size=(16, 16))
        assert np.array_equal(a.act(G.GroupElement(8, 2), x), np.rot90(x))

    def test_homomorphism_within_tolerance(self):
        a = G.GroupAction(8)
        x = self.smooth_bump()
        for g1 in G.elements(8):
            for g2 in G.elements(8):
                lhs = a.act(g1, a.act(g2, x))
                rhs = a.act(G.compose(g1, g2), x)
                assert np.abs(lhs - rhs).max() <= 1e-3

    def test_mask_nearest_preserves_labels(self, rng):
        a = G.GroupAction(8)
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[10:20, 12:18] = 1
        for g in G.elements(8):
            out = a.act(g, mask, mask=True)
            assert set(np.unique(out)) <= {0, 1}


class TestKernelMatrix:
    def test_matches_direct_action(self, rng):
        k = 5
        psi = rng.normal(size=(k, k)).astype(np.float32)
        action = G.GroupAction(4)
        for g in G.elements(4):
            mat = G.spatial_kernel_matrix(4, g.index, k, "float32")
            via_matrix = (mat @ psi.reshape(-1)).reshape(k, k)
            assert np.array_equal(via_matrix, action.act(g, psi))

    def test_d4_matrices_are_permutations(self):
        for g in G.elements(4):
            mat = G.spatial_kernel_matrix(4, g.index, 3, "float32")
            assert np.array_equal(mat.sum(axis=0), np.ones(9))
            assert np.array_equal(mat.sum(axis=1), np.ones(9))
            assert set(np.unique(mat)) <= {0.0, 1.0}
