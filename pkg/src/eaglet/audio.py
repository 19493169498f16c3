"""Log-mel frontend for 16 kHz mono audio."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

N_FFT = 400


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = 80, n_fft: int = N_FFT, sample_rate: int = 16000) -> np.ndarray:
    """[n_mels, n_fft // 2 + 1] triangular filters on the HTK mel scale."""
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb *= (2.0 / (hi - lo))  # equal-area normalization
    fb.flags.writeable = False
    return fb


def log_mel(wave: np.ndarray, n_mels: int = 80, hop: int = 160, sample_rate: int = 16000) -> np.ndarray:
    """[ceil(n / hop), n_mels] normalized log-mel frames.

    Frame i is centred on sample i * hop (zero padding at both ends). The log is
    floored at 1e-10 power and at (max - 8) so silence stays finite.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.size == 0:
        raise ValueError("expected a non-empty mono waveform")
    n_frames = -(-wave.size // hop)
    half = N_FFT // 2
    padded = np.pad(wave, (half, half + n_frames * hop))
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::hop][:n_frames]
    spec = np.abs(np.fft.rfft(frames * np.hanning(N_FFT + 1)[:-1], axis=-1)) ** 2
    mel = spec @ mel_filterbank(n_mels, N_FFT, sample_rate).T
    logm = np.log10(np.maximum(mel, 1e-10))
    logm = np.maximum(logm, logm.max() - 8.0)
    return ((logm + 4.0) / 4.0).astype(np.float32)
