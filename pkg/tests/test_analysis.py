import numpy as np
import pytest

from vqapc.analysis import (
    Contingency,
    accumulate_cooccurrence,
    analysis_stats,
    conditional_prob,
    emit_heatmap,
    normalized_mutual_information,
    read_code_file,
    spectral_cocluster,
    write_code_file,
)
from vqapc.errors import ConfigError, DataError


def nmi_oracle(counts):
    """Independent brute-force NMI: per-cell loops, no vectorization."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    joint = counts / total
    p_row = [joint[i].sum() for i in range(joint.shape[0])]
    p_col = [joint[:, j].sum() for j in range(joint.shape[1])]
    mi = 0.0
    for i in range(joint.shape[0]):
        for j in range(joint.shape[1]):
            if joint[i, j] > 0:
                mi += joint[i, j] * np.log(joint[i, j] / (p_row[i] * p_col[j]))
    h_row = -sum(p * np.log(p) for p in p_row if p > 0)
    h_col = -sum(p * np.log(p) for p in p_col if p > 0)
    if h_row + h_col == 0:
        return 0.0
    return 2.0 * max(0.0, mi) / (h_row + h_col)


def block_matrix(block_sizes_rows, block_sizes_cols, rng, low=5.0, high=10.0):
    """Block-diagonal co-occurrence matrix with strong diagonal blocks."""
    R, C = sum(block_sizes_rows), sum(block_sizes_cols)
    A = rng.uniform(0.0, 0.05, size=(R, C))
    r = c = 0
    for br, bc in zip(block_sizes_rows, block_sizes_cols):
        A[r : r + br, c : c + bc] = rng.uniform(low, high, size=(br, bc))
        r += br
        c += bc
    return A


class TestCooccurrence:
    def test_hand_counts(self):
        codes = [np.array([0, 0, 1]), np.array([1])]
        phones = [np.array([2, 2, 0]), np.array([0])]
        cont = accumulate_cooccurrence(codes, phones, num_phones=3, num_codes=2)
        expected = np.array([[0, 2], [0, 0], [2, 0]])
        assert np.array_equal(cont.counts, expected)

    def test_additive_over_utterances(self):
        rng = np.random.default_rng(0)
        codes = [rng.integers(0, 6, size=t) for t in (20, 35, 11)]
        phones = [rng.integers(0, 4, size=t) for t in (20, 35, 11)]
        whole = accumulate_cooccurrence(codes, phones, 4, 6).counts
        parts = sum(
            accumulate_cooccurrence([c], [p], 4, 6).counts for c, p in zip(codes, phones)
        )
        assert np.array_equal(whole, parts)

    def test_total_equals_frames(self):
        rng = np.random.default_rng(1)
        codes = [rng.integers(0, 8, size=50)]
        phones = [rng.integers(0, 5, size=50)]
        cont = accumulate_cooccurrence(codes, phones, 5, 8)
        assert cont.counts.sum() == 50

    def test_length_mismatch_names_utterance(self):
        with pytest.raises(DataError, match="utt3"):
            accumulate_cooccurrence(
                [np.zeros(3, int)], [np.zeros(4, int)], 2, 2, utterance_ids=["utt3"]
            )

    def test_negative_counts_rejected(self):
        with pytest.raises(DataError):
            Contingency(np.array([[1, -1]]), ["0"], [0])


class TestConditionalProb:
    def test_columns_sum_to_one_or_zero(self):
        rng = np.random.default_rng(2)
        counts = rng.integers(0, 10, size=(6, 9))
        counts[:, 4] = 0
        cond = conditional_prob(Contingency(counts, list("abcdef"), list(range(9))))
        sums = cond.sum(axis=0)
        assert np.allclose(np.delete(sums, 4), 1.0)
        assert sums[4] == 0.0

    def test_hand_example(self):
        cont = Contingency(np.array([[3, 0], [1, 2]]), ["a", "b"], [0, 1])
        cond = conditional_prob(cont)
        assert np.allclose(cond, [[0.75, 0.0], [0.25, 1.0]])


class TestNmi:
    def test_matches_oracle_on_random_tables(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            shape = (rng.integers(2, 12), rng.integers(2, 12))
            counts = rng.integers(0, 20, size=shape)
            counts[0, 0] += 1  # guarantee a non-empty table
            cont = Contingency(counts, [str(i) for i in range(shape[0])], list(range(shape[1])))
            assert normalized_mutual_information(cont) == pytest.approx(
                nmi_oracle(counts), abs=1e-9
            )

    def test_identity_table_is_one(self):
        cont = Contingency(np.eye(7, dtype=int) * 3, [str(i) for i in range(7)], list(range(7)))
        assert normalized_mutual_information(cont) == pytest.approx(1.0)

    def test_independent_table_near_zero(self):
        row = np.array([2, 5, 3])
        col = np.array([4, 1, 2, 3])
        cont = Contingency(np.outer(row, col), list("abc"), list(range(4)))
        assert normalized_mutual_information(cont) < 1e-9

    def test_permutation_symmetric(self):
        rng = np.random.default_rng(4)
        counts = rng.integers(0, 15, size=(5, 8))
        counts[0, 0] += 1
        base = normalized_mutual_information(Contingency(counts, list("abcde"), list(range(8))))
        shuffled = counts[rng.permutation(5)][:, rng.permutation(8)]
        assert normalized_mutual_information(
            Contingency(shuffled, list("abcde"), list(range(8)))
        ) == pytest.approx(base, abs=1e-12)

    def test_empty_table_rejected(self):
        with pytest.raises(DataError):
            normalized_mutual_information(Contingency(np.zeros((3, 3), int), list("abc"), [0, 1, 2]))

    def test_bounded_zero_one(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            counts = rng.integers(0, 30, size=(6, 6))
            counts[1, 1] += 1
            v = normalized_mutual_information(Contingency(counts, list("abcdef"), list(range(6))))
            assert 0.0 <= v <= 1.0 + 1e-12


class TestCocluster:
    def test_recovers_planted_blocks(self):
        rng = np.random.default_rng(6)
        A = block_matrix([4, 5, 3], [6, 4, 5], rng)
        ordering = spectral_cocluster(A, k=3, seed=0)
        true_rows = np.repeat([0, 1, 2], [4, 5, 3])
        true_cols = np.repeat([0, 1, 2], [6, 4, 5])
        # cluster ids are arbitrary; each recovered cluster must be pure
        for labels, truth in ((ordering.row_clusters, true_rows), (ordering.col_clusters, true_cols)):
            for c in np.unique(labels):
                assert np.unique(truth[labels == c]).size == 1

    def test_permutations_are_permutations(self):
        rng = np.random.default_rng(7)
        A = rng.uniform(size=(10, 14)) + 0.1
        ordering = spectral_cocluster(A, k=4, seed=1)
        assert sorted(ordering.row_perm.tolist()) == list(range(10))
        assert sorted(ordering.col_perm.tolist()) == list(range(14))

    def test_zero_columns_placed_last(self):
        rng = np.random.default_rng(8)
        A = block_matrix([3, 3], [3, 3], rng)
        A = np.concatenate([A, np.zeros((6, 2))], axis=1)[:, [0, 6, 1, 2, 3, 4, 5, 7]]
        ordering = spectral_cocluster(A, k=2, seed=0)
        assert set(ordering.col_perm[-2:].tolist()) == {1, 7}
        assert ordering.col_clusters[1] == -1 and ordering.col_clusters[7] == -1

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(9)
        A = rng.uniform(size=(12, 12)) + 0.05
        o1 = spectral_cocluster(A, k=3, seed=5)
        o2 = spectral_cocluster(A, k=3, seed=5)
        assert np.array_equal(o1.row_perm, o2.row_perm)
        assert np.array_equal(o1.col_perm, o2.col_perm)

    def test_k_validation(self):
        A = np.ones((4, 4))
        with pytest.raises(ConfigError):
            spectral_cocluster(A, k=1)
        with pytest.raises(ConfigError):
            spectral_cocluster(A, k=5)


class TestHeatmap:
    def test_clipping_and_csv_layout(self, tmp_path):
        matrix = np.array([[0.2, 0.9], [0.6, 0.1]])
        ordering = spectral_cocluster(matrix + 0.01, k=2, seed=0)
        path = tmp_path / "heat.csv"
        display = emit_heatmap(matrix, ordering, saturation=0.5, path=path)
        assert display.max() <= 0.5
        rows = [line.split(",") for line in path.read_text().strip().splitlines()]
        assert len(rows) == 2 and len(rows[0]) == 2
        assert float(rows[0][0]) <= 0.5

    def test_png_written(self, tmp_path):
        rng = np.random.default_rng(10)
        matrix = rng.uniform(size=(6, 8))
        ordering = spectral_cocluster(matrix + 0.01, k=2, seed=0)
        png = tmp_path / "heat.png"
        emit_heatmap(matrix, ordering, 0.5, tmp_path / "heat.csv", image_path=png)
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_bad_saturation(self, tmp_path):
        ordering = spectral_cocluster(np.ones((3, 3)) + np.eye(3), k=2, seed=0)
        with pytest.raises(ConfigError):
            emit_heatmap(np.ones((3, 3)), ordering, 0.0, tmp_path / "x.csv")


class TestStatsAndCodes:
    def test_stats_fields(self):
        counts = np.array([[5, 0, 0], [0, 3, 0]])
        cont = Contingency(counts, ["a", "b"], [0, 1, 2])
        stats = analysis_stats(cont)
        assert stats["num_used_codes"] == 2
        assert stats["per_code_top_phone"] == {"0": "a", "1": "b"}
        assert stats["nmi"] == pytest.approx(nmi_oracle(counts))

    def test_code_file_round_trip(self, tmp_path):
        codes = np.array([3, 1, 4, 1, 5])
        path = tmp_path / "u.codes"
        write_code_file(path, codes)
        assert np.array_equal(read_code_file(path), codes)

    def test_missing_code_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            read_code_file(tmp_path / "nope.codes")
