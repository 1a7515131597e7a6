"""Speech front end: WAV reading, log-Mel filterbanks, per-speaker
normalization, and the on-disk corpus formats (FMAT features + JSON
sidecars + JSONL manifest + frame-level phone alignments)."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .numerics import load_fmat, save_fmat

NUM_PHONES = 42


@dataclass
class Utterance:
    id: str
    speaker_id: str
    samples: np.ndarray  # mono PCM16 amplitudes as float
    sample_rate: int

    def __post_init__(self):
        if self.samples.size == 0:
            raise DataError(f"utterance {self.id}: empty sample buffer")
        if self.sample_rate <= 0:
            raise DataError(f"utterance {self.id}: bad sample rate")


@dataclass
class FeatureSequence:
    utterance_id: str
    speaker_id: str
    frames: np.ndarray  # (T, D) float32

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"utterance {self.utterance_id}: frames must be a T x D matrix, T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"utterance {self.utterance_id}: non-finite feature values")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class MelConfig:
    sample_rate: int = 16000
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if not (self.fmin < self.fmax <= self.sample_rate / 2):
            raise ConfigError("require fmin < fmax <= sample_rate/2")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")

    @property
    def frame_samples(self):
        return int(round(self.frame_length_ms * self.sample_rate / 1000.0))

    @property
    def shift_samples(self):
        return int(round(self.frame_shift_ms * self.sample_rate / 1000.0))


def read_wav(path, utterance_id=None, speaker_id=""):
    """Read a PCM16 WAV file; stereo is averaged down to mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getsampwidth() != 2:
                raise DataError(f"{path}: only 16-bit PCM is supported")
            n_channels = wf.getnchannels()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: malformed WAV ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if n_channels > 1:
        pcm = pcm.reshape(-1, n_channels).mean(axis=1)
    return Utterance(
        id=utterance_id or path.stem,
        speaker_id=speaker_id,
        samples=pcm,
        sample_rate=rate,
    )


def write_wav(path, samples, sample_rate):
    """Write mono PCM16; values are clipped to the int16 range."""
    pcm = np.clip(np.asarray(samples), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig):
    """Triangular filters evaluated on the rFFT grid. Returns (n_mels, n_fft//2+1)."""
    mel_points = np.linspace(mel_scale(cfg.fmin), mel_scale(cfg.fmax), cfg.n_mels + 2)
    hz_points = inverse_mel_scale(mel_points)
    fft_freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)
    weights = np.zeros((cfg.n_mels, fft_freqs.size), dtype=np.float64)
    for m in range(cfg.n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - center, 1e-12)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    return weights


def mel_center_frequencies(cfg: MelConfig):
    mel_points = np.linspace(mel_scale(cfg.fmin), mel_scale(cfg.fmax), cfg.n_mels + 2)
    return inverse_mel_scale(mel_points)[1:-1]


def log_mel(utt: Utterance, cfg: MelConfig) -> FeatureSequence:
    """Frame, window (Hann), FFT, mel-integrate, floor, and log."""
    frame_len = cfg.frame_samples
    shift = cfg.shift_samples
    if utt.samples.size < frame_len:
        raise DataError(f"utterance {utt.id}: shorter than one frame")
    if cfg.n_fft < frame_len:
        raise ConfigError("n_fft must be >= frame length in samples")
    n_frames = 1 + (utt.samples.size - frame_len) // shift
    window = np.hanning(frame_len)
    idx = np.arange(frame_len)[None, :] + shift * np.arange(n_frames)[:, None]
    frames = utt.samples[idx] * window
    spectrum = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    energies = power @ mel_filterbank(cfg).T
    feats = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureSequence(utt.id, utt.speaker_id, feats.astype(np.float32))


def normalize_per_speaker(seqs):
    """Standardize each feature dimension to zero mean / unit variance using
    statistics pooled over all frames of each speaker. Dimensions with
    near-zero variance (< 1e-8) are mapped to zero."""
    if not seqs:
        raise DataError("normalize_per_speaker: empty input")
    by_speaker = {}
    for seq in seqs:
        by_speaker.setdefault(seq.speaker_id, []).append(seq)
    out = {}
    for speaker, group in by_speaker.items():
        pooled = np.concatenate([s.frames.astype(np.float64) for s in group], axis=0)
        mean = pooled.mean(axis=0)
        var = pooled.var(axis=0)  # population variance
        degenerate = var < 1e-8
        scale = 1.0 / np.sqrt(np.where(degenerate, 1.0, var))
        for s in group:
            frames = (s.frames.astype(np.float64) - mean) * scale
            frames[:, degenerate] = 0.0
            out[id(s)] = FeatureSequence(s.utterance_id, s.speaker_id, frames.astype(np.float32))
    return [out[id(s)] for s in seqs]


# -- corpus file formats -----------------------------------------------------


def save_feature_sequence(out_dir, seq: FeatureSequence, frame_shift_ms=10.0):
    """Write <id>.fmat plus its JSON sidecar; returns the feature path."""
    out_dir = Path(out_dir)
    feat_path = out_dir / f"{seq.utterance_id}.fmat"
    save_fmat(feat_path, seq.frames)
    sidecar = {
        "utterance_id": seq.utterance_id,
        "speaker_id": seq.speaker_id,
        "n_frames": int(seq.num_frames),
        "dim": int(seq.dim),
        "frame_shift_ms": frame_shift_ms,
    }
    with open(out_dir / f"{seq.utterance_id}.json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
    return feat_path


def load_feature_sequence(feat_path):
    feat_path = Path(feat_path)
    sidecar_path = feat_path.with_suffix(".json")
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar for {feat_path}")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    frames = load_fmat(feat_path)
    return FeatureSequence(meta["utterance_id"], meta["speaker_id"], frames)


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: bad manifest line ({exc})") from exc
            if "id" not in rec or "speaker_id" not in rec:
                raise DataError(f"{path}:{line_no}: manifest record needs id and speaker_id")
            records.append(rec)
    return records


def write_alignment(path, phone_ids):
    with open(path, "w") as fh:
        fh.write(" ".join(str(int(p)) for p in phone_ids) + "\n")


def read_alignment(path, num_phones=NUM_PHONES):
    path = Path(path)
    if not path.exists():
        raise DataError(f"alignment not found: {path}")
    ids = np.array(path.read_text().split(), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= num_phones):
        raise DataError(f"{path}: phone ids outside [0, {num_phones - 1}]")
    return ids


def load_corpus(data_dir, manifest_name="manifest.jsonl"):
    """Load every utterance in a manifest; returns (sequences, alignments dict)."""
    data_dir = Path(data_dir)
    records = read_manifest(data_dir / manifest_name)
    seqs = []
    alignments = {}
    for rec in records:
        if "feature_path" not in rec:
            raise DataError(f"utterance {rec['id']}: manifest record lacks feature_path")
        seq = load_feature_sequence(data_dir / rec["feature_path"])
        seqs.append(seq)
        if rec.get("phone_alignment_path"):
            alignments[rec["id"]] = read_alignment(data_dir / rec["phone_alignment_path"])
    return seqs, alignments


def mel_config_from_dict(d):
    return MelConfig(**d) if d else MelConfig()


def mel_config_to_dict(cfg):
    return asdict(cfg)
