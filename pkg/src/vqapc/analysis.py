"""Code/phone co-occurrence analysis: the contingency table, conditional
probabilities P(phone|code), normalized mutual information, bipartite
spectral co-clustering for heatmap ordering, and heatmap emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class Contingency:
    counts: np.ndarray  # (P, V) non-negative integers
    row_labels: list
    col_labels: list

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise DataError("contingency counts must be a matrix")
        if (self.counts < 0).any():
            raise DataError("contingency counts must be non-negative")


@dataclass
class CoclusterOrdering:
    row_perm: np.ndarray
    col_perm: np.ndarray
    k: int
    row_clusters: np.ndarray = None
    col_clusters: np.ndarray = None


def accumulate_cooccurrence(code_seqs, phone_seqs, num_phones, num_codes, utterance_ids=None):
    """Frame-level (phone, code) counts across a corpus."""
    if len(code_seqs) != len(phone_seqs):
        raise DataError("code/phone sequence list length mismatch")
    counts = np.zeros((num_phones, num_codes), dtype=np.int64)
    for i, (codes, phones) in enumerate(zip(code_seqs, phone_seqs)):
        codes = np.asarray(codes, dtype=np.int64)
        phones = np.asarray(phones, dtype=np.int64)
        if codes.shape[0] != phones.shape[0]:
            uid = utterance_ids[i] if utterance_ids else f"#{i}"
            raise DataError(
                f"utterance {uid}: {codes.shape[0]} codes but {phones.shape[0]} phone labels"
            )
        np.add.at(counts, (phones, codes), 1)
    return Contingency(
        counts,
        row_labels=[str(p) for p in range(num_phones)],
        col_labels=list(range(num_codes)),
    )


def conditional_prob(cont: Contingency) -> np.ndarray:
    """Column-normalized counts: P(phone|code). Unused codes (all-zero
    columns) yield all-zero output columns."""
    counts = cont.counts.astype(np.float64)
    col_sums = counts.sum(axis=0)
    safe = np.where(col_sums > 0, col_sums, 1.0)
    return counts / safe


def normalized_mutual_information(cont: Contingency) -> float:
    """NMI = 2 I(phone; code) / (H(phone) + H(code)) from the maximum-
    likelihood joint distribution; 0 log 0 is taken as 0."""
    counts = cont.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise DataError("contingency table is empty")
    joint = counts / total
    p_row = joint.sum(axis=1)
    p_col = joint.sum(axis=0)

    nz = joint > 0
    outer = np.outer(p_row, p_col)
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
    h_row = float(-np.sum(p_row[p_row > 0] * np.log(p_row[p_row > 0])))
    h_col = float(-np.sum(p_col[p_col > 0] * np.log(p_col[p_col > 0])))
    if h_row + h_col == 0.0:
        return 0.0
    return max(0.0, mi) * 2.0 / (h_row + h_col)


def _kmeans(points, k, seed, restarts=10, iters=100):
    """Plain Lloyd k-means with seeded random-point init; best inertia wins."""
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = points[rng.choice(n, size=k, replace=False)].copy()
        for _ in range(iters):
            dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            labels = dists.argmin(axis=1)
            new_centers = centers.copy()
            for c in range(k):
                members = points[labels == c]
                if len(members):
                    new_centers[c] = members.mean(axis=0)
                else:
                    new_centers[c] = points[rng.integers(n)]
            if np.allclose(new_centers, centers):
                centers = new_centers
                break
            centers = new_centers
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), labels].sum())
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, labels
    return best_labels


def spectral_cocluster(matrix, k, seed=0) -> CoclusterOrdering:
    """Bipartite spectral co-clustering (Dhillon-style): normalize
    A_n = D_r^{-1/2} A D_c^{-1/2}, embed rows/columns with singular vectors
    2..ceil(log2 k)+1, and jointly k-means rows and columns into k
    clusters. Returns row/column permutations sorted by cluster id, stable
    within each cluster. All-zero rows/columns are excluded from
    clustering and appended at the end of their permutation."""
    A = np.asarray(matrix, dtype=np.float64)
    if k < 2:
        raise ConfigError("k must be >= 2")
    row_keep = np.where(A.sum(axis=1) > 0)[0]
    col_keep = np.where(A.sum(axis=0) > 0)[0]
    if k > min(row_keep.size, col_keep.size):
        raise ConfigError(f"k={k} exceeds usable matrix dimensions")
    B = A[np.ix_(row_keep, col_keep)]

    d_r = B.sum(axis=1)
    d_c = B.sum(axis=0)
    inv_sqrt_r = 1.0 / np.sqrt(d_r)
    inv_sqrt_c = 1.0 / np.sqrt(d_c)
    An = inv_sqrt_r[:, None] * B * inv_sqrt_c[None, :]

    U, _, Vt = np.linalg.svd(An, full_matrices=False)
    n_vecs = int(np.ceil(np.log2(k)))
    take = slice(1, 1 + n_vecs)
    row_embed = inv_sqrt_r[:, None] * U[:, take]
    col_embed = inv_sqrt_c[:, None] * Vt.T[:, take]

    joint = np.concatenate([row_embed, col_embed], axis=0)
    labels = _kmeans(joint, k, seed)
    row_clusters = labels[: row_embed.shape[0]]
    col_clusters = labels[row_embed.shape[0] :]

    row_perm = row_keep[np.argsort(row_clusters, kind="stable")]
    col_perm = col_keep[np.argsort(col_clusters, kind="stable")]
    row_perm = np.concatenate([row_perm, np.setdiff1d(np.arange(A.shape[0]), row_keep)])
    col_perm = np.concatenate([col_perm, np.setdiff1d(np.arange(A.shape[1]), col_keep)])

    full_row_clusters = np.full(A.shape[0], -1, dtype=np.int64)
    full_row_clusters[row_keep] = row_clusters
    full_col_clusters = np.full(A.shape[1], -1, dtype=np.int64)
    full_col_clusters[col_keep] = col_clusters
    return CoclusterOrdering(
        row_perm=row_perm.astype(np.int64),
        col_perm=col_perm.astype(np.int64),
        k=k,
        row_clusters=full_row_clusters,
        col_clusters=full_col_clusters,
    )


def emit_heatmap(matrix, ordering: CoclusterOrdering, saturation, path, image_path=None):
    """Write the permuted matrix, clipped to [0, saturation], as CSV; when
    image_path is given, also render a colormapped PNG."""
    if saturation <= 0:
        raise ConfigError("saturation must be positive")
    A = np.asarray(matrix, dtype=np.float64)
    permuted = A[np.ix_(ordering.row_perm, ordering.col_perm)]
    display = np.clip(permuted, 0.0, saturation)
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in display:
                writer.writerow([f"{v:.8f}" for v in row])
    except OSError as exc:
        raise DataError(f"cannot write heatmap CSV to {path}: {exc}") from exc
    if image_path is not None:
        from .plots import save_heatmap_image

        save_heatmap_image(display, saturation, image_path)
    return display


def analysis_stats(cont: Contingency):
    """Summary statistics: NMI, used-code count, per-code top phone."""
    cond = conditional_prob(cont)
    used = cont.counts.sum(axis=0) > 0
    top_phone = {}
    for c in range(cont.counts.shape[1]):
        if used[c]:
            top_phone[str(cont.col_labels[c])] = cont.row_labels[int(np.argmax(cond[:, c]))]
    return {
        "nmi": normalized_mutual_information(cont),
        "num_used_codes": int(used.sum()),
        "per_code_top_phone": top_phone,
    }


def write_stats_json(path, stats):
    with open(path, "w") as fh:
        json.dump(stats, fh, sort_keys=True, indent=2)


def read_code_file(path):
    """Code-index file: text, one integer index per frame."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"code file not found: {path}")
    return np.array(path.read_text().split(), dtype=np.int64)


def write_code_file(path, codes):
    with open(path, "w") as fh:
        fh.write(" ".join(str(int(c)) for c in codes) + "\n")
