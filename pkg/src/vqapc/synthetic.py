"""Seed-deterministic synthetic corpus with known phone and speaker
factors. Each frame is phone_template[p] + speaker_offset[s] + noise, and
the phone sequence follows a self-loop Markov chain, so future frames are
predictable from the past and probes have exact ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .features import FeatureSequence, save_feature_sequence, write_alignment, write_manifest


@dataclass
class SynthConfig:
    num_speakers: int = 4
    num_phones: int = 8
    utterances_per_speaker: int = 13
    frames_per_utterance: int = 60
    feature_dim: int = 20
    noise_std: float = 0.3
    markov_self_loop: float = 0.9
    template_separation: float = 5.0  # pairwise template distance / noise_std, per dim
    speaker_offset_scale: float = 2.5  # speaker offset magnitude / noise_std, per dim
    seed: int = 0

    def __post_init__(self):
        for name in ("num_speakers", "num_phones", "utterances_per_speaker",
                     "frames_per_utterance", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0.0 <= self.markov_self_loop < 1.0):
            raise ConfigError("markov_self_loop must be in [0, 1)")

    def to_dict(self):
        return {
            "num_speakers": self.num_speakers,
            "num_phones": self.num_phones,
            "utterances_per_speaker": self.utterances_per_speaker,
            "frames_per_utterance": self.frames_per_utterance,
            "feature_dim": self.feature_dim,
            "noise_std": self.noise_std,
            "markov_self_loop": self.markov_self_loop,
            "template_separation": self.template_separation,
            "speaker_offset_scale": self.speaker_offset_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d) if d else cls()


def _scaled_templates(rng, count, dim, target_rms_per_dim):
    """Standard-normal rows rescaled so the RMS per-dimension pairwise
    difference is about target_rms_per_dim."""
    raw = rng.normal(size=(count, dim))
    if count == 1:
        return raw * target_rms_per_dim
    diffs = raw[:, None, :] - raw[None, :, :]
    off_diag = ~np.eye(count, dtype=bool)
    rms = np.sqrt(np.mean(diffs[off_diag] ** 2))
    return raw * (target_rms_per_dim / max(rms, 1e-12))


def generate_corpus(cfg: SynthConfig):
    """Returns (sequences, alignments, speaker_ids), all parallel lists.
    Byte-identical output for identical configs."""
    rng = np.random.default_rng(cfg.seed)
    noise_ref = max(cfg.noise_std, 1e-3)  # keeps templates non-degenerate at noise_std=0
    templates = _scaled_templates(
        rng, cfg.num_phones, cfg.feature_dim, cfg.template_separation * noise_ref
    )
    offsets = rng.normal(size=(cfg.num_speakers, cfg.feature_dim)) * (
        cfg.speaker_offset_scale * noise_ref
    )

    sequences, alignments, speaker_ids = [], [], []
    for s in range(cfg.num_speakers):
        speaker = f"spk{s:03d}"
        for u in range(cfg.utterances_per_speaker):
            phones = np.empty(cfg.frames_per_utterance, dtype=np.int64)
            phones[0] = rng.integers(cfg.num_phones)
            for t in range(1, cfg.frames_per_utterance):
                if rng.random() < cfg.markov_self_loop or cfg.num_phones == 1:
                    phones[t] = phones[t - 1]
                else:
                    step = rng.integers(1, cfg.num_phones)
                    phones[t] = (phones[t - 1] + step) % cfg.num_phones
            frames = templates[phones] + offsets[s]
            if cfg.noise_std > 0:
                frames = frames + rng.normal(0.0, cfg.noise_std, size=frames.shape)
            uid = f"{speaker}_utt{u:03d}"
            sequences.append(FeatureSequence(uid, speaker, frames.astype(np.float32)))
            alignments.append(phones)
            speaker_ids.append(speaker)
    return sequences, alignments, speaker_ids


def write_corpus(out_dir, sequences, alignments=None):
    """Write the standard on-disk corpus layout (FMAT + sidecars +
    alignments + manifest.jsonl); indistinguishable from featurized audio."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, seq in enumerate(sequences):
        save_feature_sequence(out_dir, seq)
        rec = {
            "id": seq.utterance_id,
            "speaker_id": seq.speaker_id,
            "feature_path": f"{seq.utterance_id}.fmat",
        }
        if alignments is not None:
            ali_path = f"{seq.utterance_id}.phn"
            write_alignment(out_dir / ali_path, alignments[i])
            rec["phone_alignment_path"] = ali_path
        records.append(rec)
    write_manifest(out_dir / "manifest.jsonl", records)
    return out_dir / "manifest.jsonl"
