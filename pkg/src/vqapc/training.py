"""Mini-batch training of the VQ-APC model with Adam, checkpointing, and
loss-curve logging."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericsError
from .model import VqApcModel, apc_forward, masked_apc_loss
from .numerics import AdamState, adam_step

# distinct RNG substreams derived from the training seed
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_GUMBEL = 2


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    max_frames_per_batch: int = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be >= 1")

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "max_frames_per_batch": self.max_frames_per_batch,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d) if d else cls()


@dataclass
class TrainState:
    adam: AdamState
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    seed: int = 0


@dataclass
class Batch:
    utterance_ids: list
    frames: np.ndarray  # (B, T_max, D), zero padded
    lengths: list


def make_batches(corpus, batch_size, seed, epoch):
    """Deterministic epoch-dependent shuffle; within windows of
    8*batch_size utterances, sequences are grouped by length (longest
    first) to limit padding, then chunked into batches."""
    if not corpus:
        raise DataError("empty corpus")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SHUFFLE, epoch]))
    order = rng.permutation(len(corpus))
    window = max(1, 8 * batch_size)
    grouped = []
    for start in range(0, len(order), window):
        chunk = list(order[start : start + window])
        chunk.sort(key=lambda i: (-corpus[i].num_frames, i))
        grouped.extend(chunk)
    batches = []
    for start in range(0, len(grouped), batch_size):
        idxs = grouped[start : start + batch_size]
        seqs = [corpus[i] for i in idxs]
        max_len = max(s.num_frames for s in seqs)
        dim = seqs[0].dim
        frames = np.zeros((len(seqs), max_len, dim), dtype=np.float32)
        for b, s in enumerate(seqs):
            frames[b, : s.num_frames] = s.frames
        batches.append(
            Batch(
                utterance_ids=[s.utterance_id for s in seqs],
                frames=frames,
                lengths=[s.num_frames for s in seqs],
            )
        )
    return batches


def split_by_frame_cap(batches, cap):
    """Re-split batches whose padded frame count exceeds the cap."""
    if cap is None:
        return batches
    out = []
    for batch in batches:
        if batch.frames.shape[0] * batch.frames.shape[1] <= cap:
            out.append(batch)
            continue
        for b in range(batch.frames.shape[0]):
            length = batch.lengths[b]
            out.append(
                Batch(
                    utterance_ids=[batch.utterance_ids[b]],
                    frames=batch.frames[b : b + 1, :length].copy(),
                    lengths=[length],
                )
            )
    return out


def train_epoch(model, corpus, train_cfg, state, gumbel_rng):
    """One pass over the corpus; returns the mean normalized batch loss."""
    n = model.config.shift
    params = model.parameters()
    batches = split_by_frame_cap(
        make_batches(corpus, train_cfg.batch_size, train_cfg.seed, state.epoch),
        train_cfg.max_frames_per_batch,
    )
    losses = []
    for batch_idx, batch in enumerate(batches):
        model.zero_grad()
        trace = apc_forward(batch.frames, model, mode="train", rng=gumbel_rng)
        loss_sum, valid = masked_apc_loss(trace, batch.frames, n, batch.lengths)
        loss = loss_sum / (valid * model.config.input_dim)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericsError(
                f"non-finite loss in epoch {state.epoch}, batch {batch_idx} "
                f"(utterances {batch.utterance_ids})"
            )
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        adam_step(params, grads, state.adam, train_cfg.learning_rate)
        losses.append(value)
    return float(np.mean(losses))


def train(corpus, model_cfg, train_cfg, out_dir=None, model=None):
    """Train a model on a feature corpus. Returns (model, TrainState).

    When out_dir is given, writes checkpoints/epoch_<k>.ckpt plus loss.csv.
    Fully deterministic for a fixed (corpus, configs, seed)."""
    if not corpus:
        raise DataError("empty corpus")
    n = model_cfg.shift
    for seq in corpus:
        if seq.num_frames <= n:
            raise DataError(f"utterance {seq.utterance_id}: length {seq.num_frames} <= shift {n}")
    if model is None:
        init_seed = int(
            np.random.SeedSequence([train_cfg.seed, _STREAM_INIT]).generate_state(1)[0]
        )
        model = VqApcModel(model_cfg, seed=init_seed)
    state = TrainState(
        adam=AdamState.for_shapes([p.shape for p in model.parameters()]),
        seed=train_cfg.seed,
    )
    gumbel_rng = np.random.default_rng(
        np.random.SeedSequence([train_cfg.seed, _STREAM_GUMBEL])
    )
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    for _ in range(train_cfg.epochs):
        mean_loss = train_epoch(model, corpus, train_cfg, state, gumbel_rng)
        state.epoch += 1
        state.loss_history.append(mean_loss)
        if ckpt_dir is not None and (
            state.epoch == train_cfg.epochs
            or (train_cfg.checkpoint_every and state.epoch % train_cfg.checkpoint_every == 0)
        ):
            from .model import save_checkpoint

            save_checkpoint(
                ckpt_dir / f"epoch_{state.epoch}.ckpt",
                model,
                state.epoch,
                state.loss_history,
                train_cfg.seed,
            )
    if out_dir is not None:
        write_loss_csv(Path(out_dir) / "loss.csv", state.loss_history)
    return model, state


def write_loss_csv(path, loss_history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(loss_history, start=1):
            writer.writerow([epoch, f"{loss:.8f}"])
