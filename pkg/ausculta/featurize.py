"""
Log-mel features: mel filterbank construction, framed power STFT, log compression and
min-max normalization. Normalized spectrograms persist as ABFT feature-cache files.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import librosa
import numpy as np

from ausculta.audio_ingest import AudioClip
from ausculta.config import FeatureConfig
from ausculta.errors import ClipTooShort, DataError, InvalidFrequencyRange, MalformedContainer
from ausculta.fileio import HEADER, atomic_write_bytes, pack_header, unpack_header

logger = logging.getLogger(__name__)

ABFT_MAGIC = b"ABFT"
N_MELS = 64
LOG_EPS = 1e-10
HOP_MS = 32.0
WIN_MS = 64.0


@dataclass(frozen=True, eq=False)
class MelFilterBank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    sample_rate: int
    n_fft: int
    f_min: float
    f_max: float
    scale: str = "htk"

    @property
    def n_mels(self) -> int:
        return int(self.weights.shape[0])


@dataclass(frozen=True, eq=False)
class LogMelSpectrogram:
    values: np.ndarray  # (n_frames, n_mels)
    hop_ms: float = HOP_MS
    source_id: str = ""
    # first frame of this window within the source spectrogram
    offset: int = 0

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_mels(self) -> int:
        return int(self.values.shape[1])


def hz_to_mel(f: float | np.ndarray, scale: str = "htk") -> float | np.ndarray:
    return librosa.hz_to_mel(f, htk=(scale == "htk"))


def build_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = 1024,
    sample_rate: int = 16000,
    f_min: float = 0.0,
    f_max: float | None = None,
    scale: str = "htk",
) -> MelFilterBank:
    """Triangular, peak-1 filters with mel-spaced edges (HTK formula unless scale='slaney')."""
    nyquist = sample_rate / 2.0
    if f_max is None:
        f_max = nyquist
    if n_mels < 1:
        raise InvalidFrequencyRange(f"n_mels must be >= 1, got {n_mels}")
    if not (0.0 <= f_min < f_max <= nyquist):
        raise InvalidFrequencyRange(f"need 0 <= f_min < f_max <= {nyquist:g} Hz, got f_min={f_min:g} f_max={f_max:g}")
    if scale not in ("htk", "slaney"):
        raise InvalidFrequencyRange(f"unknown mel scale {scale!r}")

    weights = librosa.filters.mel(
        sr=sample_rate,
        n_fft=n_fft,
        n_mels=n_mels,
        fmin=f_min,
        fmax=f_max,
        htk=(scale == "htk"),
        norm=None,
        dtype=np.float64,
    )
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise InvalidFrequencyRange(
            f"{empty.size} mel bands cover no FFT bin; lower n_mels or raise n_fft ({n_fft})"
        )
    return MelFilterBank(weights=weights, sample_rate=sample_rate, n_fft=n_fft, f_min=f_min, f_max=f_max, scale=scale)


def power_stft(clip: AudioClip, win_len: int, hop_len: int) -> np.ndarray:
    """
    |FFT|^2 of Hann-windowed frames, shape (n_frames, win_len // 2 + 1) with
    n_frames = 1 + (n - win_len) // hop_len. A trailing partial frame is dropped.
    """
    if hop_len <= 0:
        raise ValueError(f"hop_len must be positive, got {hop_len}")
    if clip.samples.ndim != 1:
        raise DataError("power_stft expects a mono clip")
    if clip.n_samples < win_len:
        raise ClipTooShort(f"{clip.source_id or 'clip'}: {clip.n_samples} samples < window {win_len}")
    stft = librosa.stft(
        np.asarray(clip.samples, dtype=np.float64),
        n_fft=win_len,
        hop_length=hop_len,
        win_length=win_len,
        window="hann",
        center=False,
    )
    return np.square(np.abs(stft)).T


def frame_params(sample_rate: int, win_ms: float = WIN_MS, hop_ms: float = HOP_MS) -> tuple[int, int]:
    return int(round(sample_rate * win_ms / 1000.0)), int(round(sample_rate * hop_ms / 1000.0))


def logmel(clip: AudioClip, fb: MelFilterBank, hop_ms: float = HOP_MS) -> LogMelSpectrogram:
    if clip.sample_rate != fb.sample_rate:
        raise DataError(f"clip at {clip.sample_rate} Hz, filterbank built for {fb.sample_rate} Hz")
    hop_len = int(round(fb.sample_rate * hop_ms / 1000.0))
    power = power_stft(clip, fb.n_fft, hop_len)
    values = np.log(power @ fb.weights.T + LOG_EPS)
    return LogMelSpectrogram(values=values, hop_ms=hop_ms, source_id=clip.source_id)


def minmax_normalize(spec: LogMelSpectrogram, per_band: bool = False) -> LogMelSpectrogram:
    """(v - min) / (max - min) over the whole matrix, or per mel band; constant spans map to 0."""
    v = spec.values
    axis = 0 if per_band else None
    lo = v.min(axis=axis, keepdims=True)
    span = v.max(axis=axis, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (v - lo) / safe, 0.0)
    return replace(spec, values=out)


class Featurizer:
    """Canonical clip -> normalized log-mel, with the filterbank built once."""

    def __init__(self, cfg: FeatureConfig = FeatureConfig(), sample_rate: int = 16000):
        self.cfg = cfg
        win_len, _ = frame_params(sample_rate, cfg.win_ms, cfg.hop_ms)
        self.fb = build_filterbank(
            n_mels=cfg.n_mels,
            n_fft=win_len,
            sample_rate=sample_rate,
            f_min=cfg.f_min,
            f_max=cfg.f_max,
            scale=cfg.mel_scale,
        )

    @property
    def win_len(self) -> int:
        return self.fb.n_fft

    def __call__(self, clip: AudioClip) -> LogMelSpectrogram:
        return minmax_normalize(logmel(clip, self.fb, self.cfg.hop_ms), per_band=self.cfg.per_band_norm)


def encode_features(spec: LogMelSpectrogram) -> bytes:
    payload = np.ascontiguousarray(spec.values, dtype="<f4").tobytes()
    return pack_header(ABFT_MAGIC, spec.n_frames, spec.n_mels) + payload


def write_feature_cache(path: Path | str, spec: LogMelSpectrogram) -> Path:
    return atomic_write_bytes(path, encode_features(spec))


def read_feature_cache(path: Path | str, source_id: str = "") -> LogMelSpectrogram:
    path = Path(path)
    buf = path.read_bytes()
    n_frames, n_mels = unpack_header(buf, ABFT_MAGIC, str(path))
    if len(buf) != HEADER.size + 4 * n_frames * n_mels:
        raise MalformedContainer(f"{path}: payload does not match {n_frames}x{n_mels}")
    values = np.frombuffer(buf, dtype="<f4", offset=HEADER.size).reshape(n_frames, n_mels).astype(np.float64)
    return LogMelSpectrogram(values=values, source_id=source_id or path.stem)
