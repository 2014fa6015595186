import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccvrsim.ccvr import GlobalClassStats, local_class_stats, merge_uploads
from ccvrsim.datakit import make_blobs
from ccvrsim.diagnostics import (
    cka_across_clients,
    classifier_norms,
    linear_cka,
    separability_report,
    sliced_wasserstein,
    write_matrix_csv,
)
from ccvrsim.errors import ArgumentError, DegenerateInputError
from ccvrsim.fedsim import aggregate
from ccvrsim.neuralcore import ModelParams, init_model
from oracles import cka_elementwise, sliced_w2_bruteforce


def _rand(seed, n=30, d=5):
    return np.random.default_rng(seed).standard_normal((n, d))


def _orthogonal(d, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return q


class TestLinearCka:
    @pytest.mark.parametrize("seed", range(5))
    def test_self_similarity(self, seed):
        assert linear_cka(_rand(seed), _rand(seed)) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_scale_and_shift_invariance(self):
        X = _rand(1)
        Y = 3.7 * X @ _orthogonal(5, 2) + np.arange(5)
        assert linear_cka(X, Y) == pytest.approx(1.0, abs=1e-9)
        assert linear_cka(X, 0.01 * X) == pytest.approx(1.0, abs=1e-9)

    def test_hand_oracle_4x2(self):
        X = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0], [2.0, 2.0]])
        Y = np.array([[0.5, 0.0], [1.0, 2.0], [-1.0, 1.0], [0.0, 3.0]])
        assert linear_cka(X, Y) == pytest.approx(cka_elementwise(X.tolist(), Y.tolist()), abs=1e-12)

    def test_different_widths(self):
        X, Y = _rand(3, d=4), _rand(4, d=7)
        assert linear_cka(X, Y) == pytest.approx(cka_elementwise(X.tolist(), Y.tolist()), abs=1e-12)

    def test_zero_variance(self):
        with pytest.raises(DegenerateInputError):
            linear_cka(np.ones((5, 2)), _rand(0, n=5, d=2))

    def test_sample_mismatch(self):
        with pytest.raises(ArgumentError):
            linear_cka(_rand(0, n=5), _rand(0, n=6))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000))
    def test_bounded(self, seed):
        value = linear_cka(_rand(seed, n=10, d=3), _rand(seed + 1, n=10, d=4))
        assert 0.0 <= value <= 1.0 + 1e-12


class TestCkaAcrossClients:
    def test_identical_models(self):
        m = init_model(4, 3, hidden=(8, 6), feature_dim=5, seed=0)
        reports = cka_across_clients([m, m.copy(), m.copy()], _rand(0, n=40, d=4))
        assert [r.name for r in reports] == ["layer_1", "layer_2", "layer_3", "classifier"]
        for r in reports:
            np.testing.assert_allclose(r.matrix, 1.0, atol=1e-9)

    def test_symmetric(self):
        models = [init_model(4, 3, hidden=(8,), feature_dim=5, seed=s) for s in range(4)]
        for r in cka_across_clients(models, _rand(1, n=40, d=4)):
            assert np.abs(r.matrix - r.matrix.T).max() <= 1e-9
            assert np.all(np.diag(r.matrix) == 1.0)

    def test_layer_selector(self):
        models = [init_model(4, 3, hidden=(8,), feature_dim=5, seed=s) for s in range(2)]
        reports = cka_across_clients(models, _rand(1, n=20, d=4), layers=[2])
        assert [r.name for r in reports] == ["classifier"]
        with pytest.raises(ArgumentError):
            cka_across_clients(models, _rand(1, n=20, d=4), layers=[5])

    def test_single_model_rejected(self):
        with pytest.raises(ArgumentError, match="need ≥ 2 models"):
            cka_across_clients([init_model(4, 3)], _rand(0, d=4))

    def test_architecture_mismatch(self):
        with pytest.raises(ArgumentError):
            cka_across_clients([init_model(4, 3, hidden=(8,)), init_model(4, 3, hidden=(9,))], _rand(0, d=4))


class TestClassifierNorms:
    def test_identity(self):
        m = ModelParams([], [], np.eye(4), np.zeros(4))
        assert classifier_norms(m).tolist() == [1.0] * 4

    def test_row_scaling(self):
        m = init_model(3, 4, hidden=(), feature_dim=3, seed=1)
        before = classifier_norms(m)
        m.classifier_weight[2] *= 3
        after = classifier_norms(m)
        assert after[2] == pytest.approx(3 * before[2])
        assert np.array_equal(np.delete(after, 2), np.delete(before, 2))

    def test_direct_recomputation(self):
        m = init_model(3, 5, hidden=(), feature_dim=4, seed=2)
        ref = [sum(v * v for v in row) ** 0.5 for row in m.classifier_weight]
        np.testing.assert_allclose(classifier_norms(m), ref, rtol=1e-15)

    def test_consistent_with_aggregate(self):
        models = [init_model(3, 4, hidden=(), feature_dim=3, seed=s) for s in range(3)]
        sizes = [2, 5, 3]
        avg_rows = sum(n * m.classifier_weight for n, m in zip(sizes, models)) / 10
        np.testing.assert_allclose(classifier_norms(aggregate(models, sizes)), np.linalg.norm(avg_rows, axis=1), atol=1e-14)


class TestSlicedWasserstein:
    def test_identical_sets(self):
        A = _rand(0, d=3)
        assert sliced_wasserstein(A, A[::-1].copy()) == pytest.approx(0.0, abs=1e-12)

    def test_point_masses(self):
        assert sliced_wasserstein(np.zeros((5, 1)), np.ones((5, 1))) == pytest.approx(1.0, abs=1e-12)

    def test_bruteforce_oracle(self):
        rng = np.random.default_rng(4)
        A = rng.normal(0, 1, (40, 2))
        B = rng.normal([2, -1], [0.5, 2.0], (40, 2))
        fast = sliced_wasserstein(A, B, projections=32, seed=11)
        assert fast == pytest.approx(sliced_w2_bruteforce(A, B, 32, 11), abs=1e-10)

    def test_symmetric(self):
        A, B = _rand(0, d=3), _rand(1, n=17, d=3) + 1
        assert sliced_wasserstein(A, B, seed=3) == pytest.approx(sliced_wasserstein(B, A, seed=3), abs=1e-12)

    def test_unequal_sizes_use_quantile_grid(self):
        rng = np.random.default_rng(0)
        A = rng.normal(0, 1, (2000, 1))
        B = rng.normal(3, 1, (3000, 1))
        assert sliced_wasserstein(A, B, projections=4) == pytest.approx(3.0, abs=0.15)

    def test_dimension_mismatch(self):
        with pytest.raises(ArgumentError):
            sliced_wasserstein(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_distinct_sets_positive(self):
        assert sliced_wasserstein(np.zeros((3, 2)), np.array([[0, 0], [0, 0], [0, 1e-3]])) > 0


class TestSeparability:
    def test_shared_distribution(self):
        gs = [GlobalClassStats(c, 100, np.zeros(3), np.eye(3)) for c in range(3)]
        rep = separability_report(gs, samples_per_class=2000)
        assert rep.mean_distance < 0.1

    def test_symmetric_zero_diagonal(self):
        gs = [GlobalClassStats(c, 100, np.full(2, float(c)), np.eye(2)) for c in range(4)]
        rep = separability_report(gs)
        assert np.array_equal(rep.matrix, rep.matrix.T) and np.all(np.diag(rep.matrix) == 0)

    def test_sample_mapping_input(self):
        rep = separability_report({0: np.zeros((4, 1)), 1: np.ones((4, 1))})
        assert rep.class_ids == [0, 1] and rep.mean_distance == pytest.approx(1.0)

    def test_single_class_rejected(self):
        with pytest.raises(ArgumentError):
            separability_report({0: np.zeros((3, 2))})

    def test_widening_separation_increases_score(self):
        scores = []
        for spread in (0.1, 0.2, 0.4, 0.8):
            ds = make_blobs(4, 200, 6, spread, 0)
            stats = merge_uploads(local_class_stats(ds.features, ds.labels, 4), 4)
            scores.append(separability_report(stats, seed=1).mean_distance)
        assert all(b > a for a, b in zip(scores, scores[1:]))

    def test_matrix_csv(self, tmp_path):
        write_matrix_csv(tmp_path / "m.csv", np.array([[0.0, 1.5], [1.5, 0.0]]), [3, 7])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "row,col,value" and lines[2] == "3,7,1.5" and len(lines) == 5


@pytest.mark.slow
def test_benchmark_classifier_cka_lowest_and_below_iid():
    from benchmark import FINAL_ROUND, trained

    def layer_means(iid):
        _, _, test, _, res = trained(0, iid)
        clients = res.snapshots[FINAL_ROUND]
        return [r.mean_offdiag for r in cka_across_clients([clients[k] for k in sorted(clients)], test.features)]

    skewed, iid = layer_means(False), layer_means(True)
    assert int(np.argmin(skewed)) == len(skewed) - 1
    assert skewed[-1] < iid[-1]
