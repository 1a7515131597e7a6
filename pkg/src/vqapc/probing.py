"""Linear probes over frozen representations: frame-level phone
classification and utterance-level (mean-pooled) speaker classification.

Probes are multinomial logistic regressions trained full-batch with Adam,
which makes the trained probe invariant to example order and to exact
duplication of the training set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .numerics import AdamState, adam_update_arrays


@dataclass
class ProbeDataset:
    features: np.ndarray  # (N, F)
    labels: np.ndarray  # (N,) int
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features must be (N, F) aligned with N labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes - 1}]")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class LinearProbe:
    weights: np.ndarray  # (C, F)
    bias: np.ndarray  # (C,)

    def logits(self, features):
        return features @ self.weights.T + self.bias

    def predict(self, features):
        # np.argmax breaks ties toward the lowest class index
        return np.argmax(self.logits(features), axis=1)


@dataclass
class ProbeConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0


def build_phone_dataset(reprs, alignments, num_classes=42, utterance_ids=None, split="train"):
    """One example per frame. reprs: list of (T, F); alignments: list of
    length-T integer label arrays."""
    if len(reprs) != len(alignments):
        raise DataError("representation/alignment list length mismatch")
    feats, labels = [], []
    for i, (rep, ali) in enumerate(zip(reprs, alignments)):
        rep = np.asarray(rep)
        ali = np.asarray(ali, dtype=np.int64)
        if rep.shape[0] != ali.shape[0]:
            uid = utterance_ids[i] if utterance_ids else f"#{i}"
            raise DataError(
                f"utterance {uid}: {rep.shape[0]} frames but {ali.shape[0]} alignment labels"
            )
        feats.append(rep)
        labels.append(ali)
    return ProbeDataset(
        np.concatenate(feats, axis=0), np.concatenate(labels), num_classes, split
    )


def build_speaker_dataset(reprs, speaker_ids, speaker_table=None, split="train"):
    """One example per utterance; the feature is the temporal mean of the
    representation rows. speaker_table optionally fixes the id -> class map."""
    if len(reprs) != len(speaker_ids):
        raise DataError("representation/speaker list length mismatch")
    if speaker_table is None:
        speaker_table = {s: i for i, s in enumerate(sorted(set(speaker_ids)))}
    feats, labels = [], []
    for rep, sid in zip(reprs, speaker_ids):
        rep = np.asarray(rep)
        if rep.shape[0] < 1:
            raise DataError("empty representation sequence")
        if sid not in speaker_table:
            raise DataError(f"unknown speaker id {sid!r}")
        feats.append(rep.mean(axis=0))
        labels.append(speaker_table[sid])
    return ProbeDataset(np.stack(feats), np.array(labels), len(speaker_table), split)


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def train_probe(train: ProbeDataset, dev: ProbeDataset, cfg: ProbeConfig = None) -> LinearProbe:
    """Full-batch Adam on mean cross-entropy; returns the epoch checkpoint
    with the lowest dev error. The upstream model is untouched (inputs are
    plain arrays)."""
    cfg = cfg or ProbeConfig()
    if len(train) == 0:
        raise DataError("empty probe training set")
    if np.unique(train.labels).size < 2:
        raise DataError("probe training set has fewer than 2 classes")
    C, F = train.num_classes, train.features.shape[1]
    rng = np.random.default_rng(cfg.seed)
    W = rng.normal(0.0, 0.01, size=(C, F)).astype(np.float64)
    b = np.zeros(C, dtype=np.float64)
    state = AdamState.for_shapes([W.shape, b.shape])
    onehot = np.zeros((len(train), C))
    onehot[np.arange(len(train)), train.labels] = 1.0
    X = train.features.astype(np.float64)

    best = LinearProbe(W.copy(), b.copy())
    best_err = error_rate(best, dev)
    for _ in range(cfg.epochs):
        probs = _softmax(X @ W.T + b)
        diff = (probs - onehot) / len(train)
        grad_W = diff.T @ X
        grad_b = diff.sum(axis=0)
        adam_update_arrays([W, b], [grad_W, grad_b], state, cfg.learning_rate)
        err = error_rate(LinearProbe(W, b), dev)
        if err < best_err:
            best_err = err
            best = LinearProbe(W.copy(), b.copy())
    return best


def error_rate(probe: LinearProbe, dataset: ProbeDataset) -> float:
    """Fraction of argmax-misclassified examples."""
    if len(dataset) == 0:
        raise DataError("empty probe dataset")
    pred = probe.predict(dataset.features.astype(np.float64))
    return float(np.mean(pred != dataset.labels))


def split_dataset(dataset: ProbeDataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded example-level split into train/dev/test ProbeDatasets."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_train = int(round(fractions[0] * len(dataset)))
    n_dev = int(round(fractions[1] * len(dataset)))
    parts = (order[:n_train], order[n_train : n_train + n_dev], order[n_train + n_dev :])
    names = ("train", "dev", "test")
    return tuple(
        ProbeDataset(dataset.features[idx], dataset.labels[idx], dataset.num_classes, name)
        for idx, name in zip(parts, names)
    )


def run_probe_task(train, dev, test, seeds=(0, 1, 2, 3, 4), cfg=None):
    """Train one probe per seed; returns list of (seed, test error)."""
    results = []
    for seed in seeds:
        probe_cfg = ProbeConfig(seed=seed) if cfg is None else ProbeConfig(
            learning_rate=cfg.learning_rate, epochs=cfg.epochs, seed=seed
        )
        probe = train_probe(train, dev, probe_cfg)
        results.append((seed, error_rate(probe, test)))
    return results


def write_probe_report(path, model_tag, layer, quantized, task, results):
    """CSV rows (model_tag, layer, quantized_flag, task, seed, error_rate)
    plus an aggregate row holding the multi-seed mean."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_tag", "layer", "quantized_flag", "task", "seed", "error_rate"])
        for seed, err in results:
            writer.writerow([model_tag, layer, int(quantized), task, seed, f"{err:.6f}"])
        mean = float(np.mean([err for _, err in results]))
        writer.writerow([model_tag, layer, int(quantized), task, "mean", f"{mean:.6f}"])
    return mean
