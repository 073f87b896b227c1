import numpy as np
import pytest

import relmeta.autodiff as ad
import relmeta.nn as nn
import relmeta.relation as rel
import relmeta.tasks as tk
from fd import finite_diff, rel_err


def vec(tape, values):
    return tape.leaf(np.asarray(values, dtype=np.float64))


def plain_cosine(u, v):
    return float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))


class TestSimilarityLayer:
    def test_init_all_ones(self):
        layer = rel.SimilarityLayer(4, 40)
        assert layer.omega.shape == (4, 40)
        assert np.all(layer.omega == 1.0)

    def test_rejects_bad_config(self):
        with pytest.raises(rel.RelationError):
            rel.SimilarityLayer(0, 40)
        with pytest.raises(rel.RelationError):
            rel.SimilarityLayer(4, 0)


class TestTaskRepresentation:
    def test_single_sample_is_feature_row(self):
        m = nn.init_model([1, 8, 8], 1, seed=0)
        tape = ad.Tape()
        mv = nn.bind(m, tape)
        md = tk.MetaData(np.array([[0.7]]), np.array([[0.0]]), np.zeros((1, 1)), np.zeros((1, 1)), 0.0)
        z = rel.task_representation(mv, md)
        feats = nn.forward_features(mv, tape.constant(np.array([[0.7]])))
        assert np.allclose(z.array, feats.array[0], atol=1e-15)

    def test_duplicate_samples_idempotent(self):
        m = nn.init_model([1, 8, 8], 1, seed=1)
        tape = ad.Tape()
        mv = nn.bind(m, tape)
        one = tk.MetaData(np.array([[1.2]]), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), 0.0)
        two = tk.MetaData(np.array([[1.2], [1.2]]), np.zeros((2, 1)), np.zeros((1, 1)), np.zeros((1, 1)), 0.0)
        assert np.allclose(rel.task_representation(mv, one).array,
                           rel.task_representation(mv, two).array, atol=1e-15)

    def test_zero_extractor_gives_zero_vector(self):
        m = nn.init_model([1, 8], 1, seed=0)
        m.extractor[0][0].fill(0.0)
        mv = nn.bind(m, ad.Tape())
        md = tk.MetaData(np.array([[1.0], [2.0]]), np.zeros((2, 1)), np.zeros((1, 1)), np.zeros((1, 1)), 0.0)
        assert np.all(rel.task_representation(mv, md).array == 0.0)

    def test_empty_metadata_rejected(self):
        m = nn.init_model([1, 8], 1, seed=0)
        mv = nn.bind(m, ad.Tape())
        md = tk.MetaData(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((1, 1)), np.zeros((1, 1)), 0.0)
        with pytest.raises(rel.RelationError, match="support"):
            rel.task_representation(mv, md)


class TestComputeRelation:
    def test_self_relation_is_one(self):
        tape = ad.Tape()
        omega = tape.leaf(np.random.default_rng(0).uniform(0.5, 2.0, size=(3, 5)))
        z = vec(tape, [1.0, -2.0, 0.5, 3.0, 0.1])
        m = rel.compute_relation(omega, z, z)
        assert float(m.array) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_is_zero(self):
        tape = ad.Tape()
        omega = tape.leaf(np.ones((4, 2)))
        a = vec(tape, [1.0, 0.0])
        b = vec(tape, [0.0, 1.0])
        assert float(rel.compute_relation(omega, a, b).array) == pytest.approx(0.0, abs=1e-15)

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            tape = ad.Tape()
            omega = tape.leaf(rng.uniform(0.1, 2.0, size=(2, 6)))
            z1 = rng.normal(size=6)
            z2 = rng.normal(size=6)
            c = rng.uniform(1e-3, 10.0)
            base = float(rel.compute_relation(omega, vec(tape, z1), vec(tape, z2)).array)
            scaled = float(rel.compute_relation(omega, vec(tape, c * z1), vec(tape, z2)).array)
            assert abs(base - scaled) < 1e-9

    def test_all_ones_masks_reduce_to_plain_cosine(self):
        rng = np.random.default_rng(4)
        for k in (1, 3, 7):
            tape = ad.Tape()
            omega = tape.leaf(np.ones((k, 8)))
            z1, z2 = rng.normal(size=8), rng.normal(size=8)
            got = float(rel.compute_relation(omega, vec(tape, z1), vec(tape, z2)).array)
            assert abs(got - plain_cosine(z1, z2)) < 1e-12

    def test_zero_norm_contributes_zero_not_nan(self):
        tape = ad.Tape()
        omega = tape.leaf(np.ones((2, 3)))
        z = vec(tape, [0.0, 0.0, 0.0])
        other = vec(tape, [1.0, 2.0, 3.0])
        m = rel.compute_relation(omega, z, other)
        assert float(m.array) == 0.0

    def test_mask_zeroing_one_head(self):
        # One head masked to a zero vector: that head yields 0, the other
        # the plain cosine, so the mean halves it.
        tape = ad.Tape()
        omega = tape.leaf(np.array([[1.0, 1.0], [0.0, 0.0]]))
        a = vec(tape, [1.0, 1.0])
        b = vec(tape, [1.0, 0.0])
        want = plain_cosine(np.array([1.0, 1.0]), np.array([1.0, 0.0])) / 2.0
        assert float(rel.compute_relation(omega, a, b).array) == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        tape = ad.Tape()
        omega = tape.leaf(np.ones((2, 3)))
        with pytest.raises(rel.RelationError, match="width"):
            rel.compute_relation(omega, vec(tape, [1.0, 2.0]), vec(tape, [1.0, 2.0]))
        with pytest.raises(rel.RelationError, match="1-D"):
            rel.compute_relation(omega, vec(tape, [[1.0, 2.0, 3.0]]), vec(tape, [[1.0, 2.0, 3.0]]))

    def test_gradient_wrt_masks_matches_fd(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            omega0 = rng.uniform(0.5, 1.5, size=(2, 4))
            z1, z2 = rng.normal(size=4), rng.normal(size=4)

            def f(flat):
                tape = ad.Tape()
                om = tape.leaf(flat.reshape(2, 4))
                return float(rel.compute_relation(om, vec(tape, z1), vec(tape, z2)).array)

            tape = ad.Tape()
            om = tape.leaf(omega0)
            m = rel.compute_relation(om, vec(tape, z1), vec(tape, z2))
            analytic = ad.backward(m)[om.index].array.ravel()
            numeric = finite_diff(f, omega0.ravel())
            assert rel_err(analytic, numeric) < 1e-4

    def test_gradient_wrt_representations_matches_fd(self):
        rng = np.random.default_rng(6)
        omega0 = rng.uniform(0.5, 1.5, size=(3, 4))
        z1, z2 = rng.normal(size=4), rng.normal(size=4)

        def f(flat):
            tape = ad.Tape()
            om = tape.leaf(omega0)
            return float(rel.compute_relation(om, tape.leaf(flat), vec(tape, z2)).array)

        tape = ad.Tape()
        v1 = tape.leaf(z1)
        m = rel.compute_relation(tape.leaf(omega0), v1, vec(tape, z2))
        analytic = ad.backward(m)[v1.index].array
        assert rel_err(analytic, finite_diff(f, z1)) < 1e-4


class TestBuildMatrix:
    def rand_reps(self, tape, rng, n, width=6):
        return [vec(tape, rng.normal(size=width)) for _ in range(n)]

    def test_identical_reps_all_ones(self):
        tape = ad.Tape()
        omega = tape.leaf(np.ones((2, 4)))
        z = np.array([0.3, -1.0, 2.0, 0.5])
        matrix = rel.build_matrix(omega, [vec(tape, z) for _ in range(4)])
        m = matrix.values()
        off = m[~np.eye(4, dtype=bool)]
        assert np.allclose(off, 1.0, atol=1e-12)

    def test_two_tasks_single_value(self):
        tape = ad.Tape()
        omega = tape.leaf(np.ones((1, 3)))
        matrix = rel.build_matrix(omega, self.rand_reps(tape, np.random.default_rng(0), 2, 3))
        m = matrix.values()
        assert m[0, 1] == m[1, 0]
        assert matrix.entry(0, 1) is matrix.entry(1, 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            tape = ad.Tape()
            omega0 = rng.uniform(0.2, 2.0, size=(3, 5))
            omega = tape.leaf(omega0)
            zs = [rng.normal(size=5) for _ in range(4)]
            matrix = rel.build_matrix(omega, [vec(tape, z) for z in zs])
            m = matrix.values()
            for i in range(4):
                for j in range(4):
                    if i == j:
                        continue
                    want = np.mean([plain_cosine(omega0[k] * zs[i], omega0[k] * zs[j])
                                    for k in range(3)])
                    assert m[i, j] == pytest.approx(want, abs=1e-12)

    def test_symmetry_and_bounds_random_batches(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            tape = ad.Tape()
            omega = tape.leaf(rng.uniform(0.1, 3.0, size=(2, 4)))
            n = int(rng.integers(2, 6))
            m = rel.build_matrix(omega, self.rand_reps(tape, rng, n, 4)).values()
            assert np.array_equal(m, m.T)
            assert np.all(m >= -1.0 - 1e-12) and np.all(m <= 1.0 + 1e-12)

    def test_rejects_single_task(self):
        tape = ad.Tape()
        omega = tape.leaf(np.ones((1, 3)))
        with pytest.raises(rel.RelationError, match="at least 2"):
            rel.build_matrix(omega, [vec(tape, [1.0, 2.0, 3.0])])

    def test_diagonal_undefined(self):
        tape = ad.Tape()
        omega = tape.leaf(np.ones((1, 3)))
        matrix = rel.build_matrix(omega, self.rand_reps(tape, np.random.default_rng(1), 3, 3))
        with pytest.raises(rel.RelationError, match="diagonal"):
            matrix.entry(1, 1)

    def test_entries_reach_omega_gradient(self):
        tape = ad.Tape()
        omega = tape.leaf(np.random.default_rng(2).uniform(0.5, 1.5, size=(2, 4)))
        matrix = rel.build_matrix(omega, self.rand_reps(tape, np.random.default_rng(3), 3, 4))
        total = matrix.entry(0, 1)
        for pair in ((0, 2), (1, 2)):
            total = ad.add(total, matrix.entry(*pair))
        g = ad.backward(total)[omega.index].array
        assert np.any(g != 0.0)


class TestWeights:
    def make_matrix(self, entries):
        # entries: dict (i,j)->value on a throwaway tape
        tape = ad.Tape()
        n = max(max(k) for k in entries) + 1
        pairs = {k: tape.constant(np.array(v)) for k, v in entries.items()}
        return rel.RelationMatrix(n, pairs)

    def test_clamp_examples(self):
        matrix = self.make_matrix({(0, 1): -0.5, (0, 2): 0.8, (1, 2): 0.0})
        w = rel.nonneg_weights(matrix)
        assert w[0, 1] == pytest.approx(1e-6, abs=1e-18)
        assert w[0, 2] == pytest.approx(0.8 + 1e-6, abs=1e-15)
        assert np.all(np.diag(w) == 0.0)

    def test_all_negative_row_positive_sum(self):
        matrix = self.make_matrix({(0, 1): -0.9, (0, 2): -1.0, (1, 2): -0.3})
        w = rel.nonneg_weights(matrix)
        assert np.all(w.sum(axis=1) > 0.0)

    def test_weight_var_matches_dense(self):
        tape = ad.Tape()
        omega = tape.leaf(np.ones((2, 3)))
        rng = np.random.default_rng(4)
        matrix = rel.build_matrix(omega, [tape.leaf(rng.normal(size=3)) for _ in range(3)])
        dense = rel.nonneg_weights(matrix)
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert float(matrix.weight_var(i, j).array) == pytest.approx(dense[i, j], abs=1e-15)

    def test_normalized_two_tasks(self):
        matrix = self.make_matrix({(0, 1): 0.37})
        norm = rel.export_normalized(matrix)
        assert norm[0, 1] == 1.0 and norm[1, 0] == 1.0

    def test_normalized_uniform(self):
        matrix = self.make_matrix({(i, j): 0.5 for i in range(4) for j in range(i + 1, 4)})
        norm = rel.export_normalized(matrix)
        off = norm[~np.eye(4, dtype=bool)]
        assert np.allclose(off, 1.0 / 3.0, atol=1e-12)

    def test_normalized_row_sums(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n = int(rng.integers(2, 7))
            entries = {(i, j): rng.uniform(-1, 1) for i in range(n) for j in range(i + 1, n)}
            norm = rel.export_normalized(self.make_matrix(entries))
            assert np.allclose(norm.sum(axis=1), 1.0, atol=1e-12)
