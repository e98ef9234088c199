"""
Training-time augmentation: random frame crops, waveform loudness scaling and
SpecAugment-style time/frequency masking. Randomness always comes from a Generator
derived from (seed, record_id, ...), so worker order never changes results.
"""
from __future__ import annotations

import hashlib
from dataclasses import replace

import numpy as np

from ausculta.audio_ingest import AudioClip
from ausculta.config import SpecAugmentConfig
from ausculta.featurize import HOP_MS, LogMelSpectrogram


def _stable_key(part: object) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def record_rng(seed: int, *keys: object) -> np.random.Generator:
    """Independent stream for (seed, *keys); string keys are hashed, not Python-hash()ed."""
    entropy = [_stable_key(seed)] + [_stable_key(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def crop_frames(crop_ms: float, hop_ms: float = HOP_MS) -> int:
    return max(1, int(crop_ms // hop_ms))


def random_crop(spec: LogMelSpectrogram, crop_ms: float, rng: np.random.Generator) -> LogMelSpectrogram:
    """Contiguous `crop_ms / hop` frame window; short spectrograms are zero-padded on the right."""
    n = crop_frames(crop_ms, spec.hop_ms)
    values = spec.values
    if values.shape[0] < n:
        values = np.pad(values, ((0, n - values.shape[0]), (0, 0)))
    start = int(rng.integers(0, values.shape[0] - n + 1))
    return replace(spec, values=values[start:start + n].copy(), offset=spec.offset + start)


def draw_gain(rng: np.random.Generator, bounds: tuple[float, float] = (0.9, 1.1)) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def loudness_scale(clip: AudioClip, rng: np.random.Generator, bounds: tuple[float, float] = (0.9, 1.1)) -> AudioClip:
    u = draw_gain(rng, bounds)
    return replace(clip, samples=clip.samples * u, gain=clip.gain * u)


def time_mask(values: np.ndarray, start: int, width: int, fill: float) -> np.ndarray:
    out = values.copy()
    out[start:start + width, :] = fill
    return out


def freq_mask(values: np.ndarray, start: int, width: int, fill: float) -> np.ndarray:
    out = values.copy()
    out[:, start:start + width] = fill
    return out


def _draw_span(rng: np.random.Generator, size: int, max_width: int) -> tuple[int, int]:
    width = int(rng.integers(0, min(max_width, size) + 1))
    start = int(rng.integers(0, size - width + 1))
    return start, width


def spec_augment(spec: LogMelSpectrogram, cfg: SpecAugmentConfig, rng: np.random.Generator) -> LogMelSpectrogram:
    """Mask time and band spans with the spectrogram's mean; other cells are untouched."""
    values = spec.values
    fill = float(values.mean())
    n_frames, n_mels = values.shape
    max_t = cfg.max_time_frames if cfg.max_time_frames is not None else int(0.1 * n_frames)
    for _ in range(cfg.n_time_masks):
        start, width = _draw_span(rng, n_frames, max_t)
        values = time_mask(values, start, width, fill)
    for _ in range(cfg.n_freq_masks):
        start, width = _draw_span(rng, n_mels, cfg.max_freq_bands)
        values = freq_mask(values, start, width, fill)
    if values is spec.values:
        return spec
    return replace(spec, values=values)
