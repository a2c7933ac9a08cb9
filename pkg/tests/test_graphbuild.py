import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connectoflow import graphbuild as gb
from connectoflow.diffcore import RandomStream
from connectoflow.synthcohort import SubjectRecord


def brute_force_top_k(corr, density):
    n = corr.shape[0]
    pairs = [
        (corr[i, j], i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if corr[i, j] > 0.0
    ]
    k = int(np.ceil(density * n * (n - 1) / 2))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    adj = np.zeros_like(corr)
    for v, i, j in pairs[:k]:
        adj[i, j] = adj[j, i] = v
    return adj


def random_symmetric(rng, n):
    m = rng.uniform((n, n)) * 2 - 1
    corr = (m + m.T) / 2
    np.fill_diagonal(corr, 1.0)
    return corr


class TestPearson:
    def test_self_correlation_one(self, rng):
        sig = rng.normal((4, 10))
        corr = gb.pearson_matrix(sig)
        np.testing.assert_allclose(np.diag(corr), 1.0)

    def test_negation_gives_minus_one(self, rng):
        row = rng.normal((1, 8))
        corr = gb.pearson_matrix(np.vstack([row, -row]))
        assert corr[0, 1] == pytest.approx(-1.0)

    def test_hand_example(self):
        corr = gb.pearson_matrix(np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 7.0]]))
        assert corr[0, 1] == pytest.approx(0.99340, abs=1e-4)

    def test_zero_variance_row_correlates_zero(self, rng):
        sig = np.vstack([np.full((1, 6), 3.0), rng.normal((2, 6))])
        corr = gb.pearson_matrix(sig)
        assert np.all(corr[0] == 0.0)
        assert np.all(corr[:, 0] == 0.0)

    def test_too_few_samples_rejected(self):
        with pytest.raises(gb.GraphInputError):
            gb.pearson_matrix(np.ones((3, 2)))

    def test_entries_bounded(self, rng):
        corr = gb.pearson_matrix(rng.normal((12, 20)))
        assert corr.max() <= 1.0 + 1e-12
        assert corr.min() >= -1.0 - 1e-12


class TestThreshold:
    def test_density_one_keeps_all_positive(self, rng):
        corr = random_symmetric(rng, 6)
        adj, warning = gb.threshold_top_positive(corr, 1.0)
        iu, ju = np.triu_indices(6, k=1)
        expected = np.where(corr[iu, ju] > 0, corr[iu, ju], 0.0)
        np.testing.assert_array_equal(adj[iu, ju], expected)

    def test_hand_example_k3(self):
        vals = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
        corr = np.eye(4)
        iu, ju = np.triu_indices(4, k=1)
        corr[iu, ju] = vals
        corr[ju, iu] = vals
        adj, _ = gb.threshold_top_positive(corr, 0.34)  # k = ceil(2.04) = 3
        kept = sorted(adj[iu, ju][adj[iu, ju] > 0].tolist(), reverse=True)
        assert kept == [0.9, 0.8, 0.7]

    def test_sparsity_warning_when_budget_unmet(self):
        corr = -np.ones((4, 4)) + 2 * np.eye(4)
        corr[0, 1] = corr[1, 0] = 0.5
        adj, warning = gb.threshold_top_positive(corr, 0.5)
        assert warning
        assert (adj != 0).sum() == 2

    def test_tie_break_lexicographic(self):
        corr = np.eye(4)
        for i, j in [(0, 1), (0, 2), (1, 2)]:
            corr[i, j] = corr[j, i] = 0.5
        corr[2, 3] = corr[3, 2] = 0.5
        adj, _ = gb.threshold_top_positive(corr, 0.34)  # k=3 of four tied pairs
        assert adj[0, 1] > 0 and adj[0, 2] > 0 and adj[1, 2] > 0
        assert adj[2, 3] == 0.0

    def test_invalid_density(self):
        with pytest.raises(gb.GraphInputError):
            gb.threshold_top_positive(np.eye(3), 0.0)

    def test_matches_brute_force_random(self, rng):
        for _ in range(100):
            n = 3 + int(rng.uniform(1)[0] * 10)
            corr = random_symmetric(rng, n)
            density = 0.05 + rng.uniform(1)[0] * 0.9
            adj, _ = gb.threshold_top_positive(corr, density)
            np.testing.assert_array_equal(adj, brute_force_top_k(corr, density))


class TestRepair:
    def test_no_isolated_unchanged(self, rng):
        corr = random_symmetric(rng, 5)
        adj, _ = gb.threshold_top_positive(np.abs(corr), 1.0)
        repaired, neg = gb.repair_isolated(adj, corr)
        np.testing.assert_array_equal(repaired, adj)
        assert not neg

    def test_leaf_reconnected_to_argmax(self):
        corr = np.eye(4)
        corr[0, 1] = corr[1, 0] = 0.9
        corr[0, 2] = corr[2, 0] = 0.4
        corr[3, 1] = corr[1, 3] = 0.6
        corr[3, 2] = corr[2, 3] = 0.2
        adj = np.zeros((4, 4))
        adj[0, 1] = adj[1, 0] = 0.9
        adj[0, 2] = adj[2, 0] = 0.4
        repaired, neg = gb.repair_isolated(adj, corr)
        assert repaired[3, 1] == pytest.approx(0.6)
        assert not neg

    def test_negative_fallback_flagged(self):
        corr = np.eye(3)
        corr[0, 1] = corr[1, 0] = 0.8
        corr[2, 0] = corr[0, 2] = -0.7
        corr[2, 1] = corr[1, 2] = -0.3
        adj = np.zeros((3, 3))
        adj[0, 1] = adj[1, 0] = 0.8
        repaired, neg = gb.repair_isolated(adj, corr)
        assert neg
        assert repaired[2, 0] == pytest.approx(-0.7)

    def test_idempotent(self, rng):
        for _ in range(20):
            corr = random_symmetric(rng, 8)
            adj, _ = gb.threshold_top_positive(corr, 0.1)
            once, _ = gb.repair_isolated(adj, corr)
            twice, _ = gb.repair_isolated(once, corr)
            np.testing.assert_array_equal(once, twice)

    def test_min_degree_after_repair(self, rng):
        for _ in range(20):
            n = 2 + int(rng.uniform(1)[0] * 10)
            corr = random_symmetric(rng, n)
            adj, _ = gb.threshold_top_positive(corr, 0.1)
            repaired, _ = gb.repair_isolated(adj, corr)
            assert (repaired != 0).sum(axis=1).min() >= 1

    def test_single_node_rejected(self):
        with pytest.raises(gb.StructureError):
            gb.repair_isolated(np.zeros((1, 1)), np.ones((1, 1)))


class TestDynamicGraph:
    def make_subject(self, rng, n_visits=3, n=10, d=8):
        return SubjectRecord(
            subject_id="subjX",
            label=1,
            visit_months=[float(t) for t in sorted(rng.uniform(n_visits) * 100)],
            signals=[rng.normal((n, d)) for _ in range(n_visits)],
            masks=[np.ones(d, dtype=bool) for _ in range(n_visits)],
        )

    def test_one_visit_subject(self, rng):
        subject = self.make_subject(rng, n_visits=1)
        graph = gb.build_dynamic_graph(subject, None, density=0.2)
        assert len(graph) == 1

    def test_invariants_on_all_slices(self, rng):
        subject = self.make_subject(rng, n_visits=4)
        graph = gb.build_dynamic_graph(subject, None, density=0.15)
        for s in graph.slices:
            np.testing.assert_array_equal(s.adjacency, s.adjacency.T)
            assert np.all(np.diag(s.adjacency) == 0.0)
            assert (s.adjacency != 0).sum(axis=1).min() >= 1

    def test_identity_recon_equals_raw(self, rng):
        subject = self.make_subject(rng)
        via_none = gb.build_dynamic_graph(subject, None, density=0.2)
        via_list = gb.build_dynamic_graph(subject, [s.copy() for s in subject.signals], density=0.2)
        for a, b in zip(via_none.slices, via_list.slices):
            np.testing.assert_array_equal(a.adjacency, b.adjacency)
            np.testing.assert_array_equal(a.features, b.features)

    def test_error_carries_subject_id(self, rng):
        subject = self.make_subject(rng, d=2)
        with pytest.raises(gb.GraphInputError, match="subjX"):
            gb.build_dynamic_graph(subject, None, density=0.2)

    def test_roundtrip_serialization(self, tmp_path, rng):
        subject = self.make_subject(rng)
        graph = gb.build_dynamic_graph(subject, None, density=0.2)
        manifest = gb.save_dynamic_graph(graph, tmp_path / "g")
        back = gb.load_dynamic_graph(manifest)
        assert back.subject_id == graph.subject_id
        assert back.label == graph.label
        assert back.times == graph.times
        for a, b in zip(back.slices, graph.slices):
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.adjacency, b.adjacency)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(min_value=2, max_value=12),
    st.integers(min_value=0, max_value=2**31),
    st.floats(min_value=0.05, max_value=1.0, allow_nan=False),
)
def test_property_threshold_matches_brute_force(n, seed, density):
    rng = RandomStream(seed)
    corr = random_symmetric(rng, n)
    adj, _ = gb.threshold_top_positive(corr, density)
    np.testing.assert_array_equal(adj, brute_force_top_k(corr, density))
    assert np.all(adj[np.triu_indices(n, k=1)] >= 0.0)
