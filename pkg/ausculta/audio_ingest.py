"""
Audio ingestion: decode RIFF/WAVE, downmix to mono, resample to the canonical rate and
trim leading/trailing silence. Canonical clips persist as ABAU files (16-byte header +
float32 little-endian samples).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy import signal

from ausculta.config import IngestConfig
from ausculta.errors import EmptyAudio, MalformedContainer, MissingAudioFile, UnsupportedEncoding
from ausculta.fileio import HEADER, atomic_write_bytes, pack_header, unpack_header

logger = logging.getLogger(__name__)

ABAU_MAGIC = b"ABAU"
CANONICAL_RATE = 16000

SUPPORTED_SUBTYPES = frozenset({"PCM_U8", "PCM_S8", "PCM_16", "PCM_24", "PCM_32", "FLOAT"})
WAV_FORMATS = frozenset({"WAV", "WAVEX"})

# polyphase anti-aliasing filter
TAPS_PER_PHASE = 64
KAISER_BETA = 8.6


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Samples are (n,) for mono or (n, channels) before downmixing."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""
    # cumulative loudness factor applied by augmentation
    gain: float = 1.0

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_channels(self) -> int:
        return 1 if self.samples.ndim == 1 else int(self.samples.shape[1])

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def is_empty(self) -> bool:
        return self.n_samples == 0


def decode_wav(path: Path | str, source_id: str = "") -> AudioClip:
    """
    Decode a WAV file to float64 amplitudes in [-1, 1] at its native rate.
    Stereo is kept as (n, 2) for `downmix_mono`.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingAudioFile(f"audio file not found: {path}")
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise MalformedContainer(f"{path}: {e}") from e
    if info.format not in WAV_FORMATS:
        raise MalformedContainer(f"{path}: not a RIFF/WAVE container ({info.format})")
    if info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedEncoding(f"{path}: unsupported sample encoding {info.subtype}")
    if info.channels not in (1, 2):
        raise UnsupportedEncoding(f"{path}: {info.channels} channels (1 or 2 supported)")
    if info.frames == 0:
        raise EmptyAudio(f"{path}: data chunk holds no samples")

    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise MalformedContainer(f"{path}: {e}") from e
    if data.shape[0] == 0:
        raise EmptyAudio(f"{path}: data chunk holds no samples")
    if not np.all(np.isfinite(data)):
        raise MalformedContainer(f"{path}: non-finite samples")
    # float WAVs may exceed full scale
    np.clip(data, -1.0, 1.0, out=data)
    samples = data[:, 0].copy() if data.shape[1] == 1 else data
    return AudioClip(samples=samples, sample_rate=int(rate), source_id=source_id or path.stem)


def downmix_mono(clip: AudioClip) -> AudioClip:
    if clip.samples.ndim == 1:
        return clip
    return replace(clip, samples=clip.samples.mean(axis=1))


@lru_cache(maxsize=32)
def _antialias_filter(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    return signal.firwin(TAPS_PER_PHASE * max_rate + 1, 1.0 / max_rate, window=("kaiser", KAISER_BETA))


def resample(clip: AudioClip, target_rate: int = CANONICAL_RATE) -> AudioClip:
    """
    Polyphase windowed-sinc resampling. Output length is round(n * target / native);
    equal rates return the clip untouched.
    """
    if clip.sample_rate <= 0 or target_rate <= 0:
        raise ValueError(f"sample rates must be positive: {clip.sample_rate} -> {target_rate}")
    if clip.sample_rate == target_rate:
        return clip
    ratio = Fraction(target_rate, clip.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    n = clip.n_samples
    n_out = (n * up + down // 2) // down
    if n == 0:
        return replace(clip, samples=clip.samples[:0].copy(), sample_rate=target_rate)

    out = signal.resample_poly(clip.samples, up, down, axis=0, window=_antialias_filter(up, down))
    if out.shape[0] >= n_out:
        out = out[:n_out]
    else:
        pad = [(0, n_out - out.shape[0])] + [(0, 0)] * (out.ndim - 1)
        out = np.pad(out, pad)
    return replace(clip, samples=np.ascontiguousarray(out), sample_rate=target_rate)


def frame_rms_db(samples: np.ndarray, frame_len: int) -> np.ndarray:
    """RMS level in dBFS of consecutive frames; the last frame may be partial."""
    x = samples if samples.ndim == 1 else samples.mean(axis=1)
    n = x.shape[0]
    n_frames = -(-n // frame_len)
    padded = np.zeros(n_frames * frame_len, dtype=np.float64)
    padded[:n] = x
    counts = np.full(n_frames, frame_len, dtype=np.float64)
    counts[-1] = n - (n_frames - 1) * frame_len
    power = np.square(padded.reshape(n_frames, frame_len)).sum(axis=1) / counts
    return 10.0 * np.log10(np.maximum(power, np.finfo(np.float64).tiny))


def trim_silence(clip: AudioClip, threshold_db: float = -60.0, frame_ms: float = 25.0) -> AudioClip:
    """
    Drop leading and trailing frames whose RMS falls below `threshold_db`. An entirely
    silent clip comes back empty; callers decide whether to skip it.
    """
    if threshold_db >= 0:
        raise ValueError(f"threshold_db must be negative, got {threshold_db}")
    if frame_ms <= 0:
        raise ValueError(f"frame_ms must be positive, got {frame_ms}")
    if clip.is_empty:
        return clip
    frame_len = max(1, int(round(clip.sample_rate * frame_ms / 1000.0)))
    loud = np.flatnonzero(frame_rms_db(clip.samples, frame_len) >= threshold_db)
    if loud.size == 0:
        return replace(clip, samples=clip.samples[:0].copy())
    start = int(loud[0]) * frame_len
    stop = min(clip.n_samples, (int(loud[-1]) + 1) * frame_len)
    if start == 0 and stop == clip.n_samples:
        return clip
    return replace(clip, samples=clip.samples[start:stop].copy())


def ingest(path: Path | str, cfg: IngestConfig = IngestConfig(), source_id: str = "") -> AudioClip:
    """decode -> downmix -> resample -> trim. Trimming runs at the canonical rate."""
    clip = decode_wav(path, source_id=source_id)
    clip = downmix_mono(clip)
    clip = resample(clip, cfg.target_rate)
    trimmed = trim_silence(clip, cfg.silence_threshold_db, cfg.silence_frame_ms)
    if trimmed.is_empty:
        logger.warning("Clip %s is silent below %.1f dBFS; excluded", clip.source_id, cfg.silence_threshold_db)
    return trimmed


def encode_canonical(clip: AudioClip) -> bytes:
    if clip.samples.ndim != 1:
        raise ValueError("canonical audio must be mono")
    payload = np.ascontiguousarray(clip.samples, dtype="<f4").tobytes()
    return pack_header(ABAU_MAGIC, clip.sample_rate, clip.n_samples) + payload


def write_canonical(path: Path | str, clip: AudioClip) -> Path:
    return atomic_write_bytes(path, encode_canonical(clip))


def read_canonical(path: Path | str, source_id: str = "") -> AudioClip:
    path = Path(path)
    buf = path.read_bytes()
    rate, n = unpack_header(buf, ABAU_MAGIC, str(path))
    expected = HEADER.size + 4 * n
    if len(buf) != expected:
        raise MalformedContainer(f"{path}: payload size {len(buf) - HEADER.size}, expected {4 * n}")
    samples = np.frombuffer(buf, dtype="<f4", offset=HEADER.size).astype(np.float64)
    return AudioClip(samples=samples, sample_rate=rate, source_id=source_id or path.stem)
