"""13-coefficient MFCC front end and its alignment to the video frame rate."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import ValidationError

N_MFCC = 13
N_MELS = 26
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10


@dataclass
class MfccMatrix:
    values: np.ndarray  # (T_a, 13)
    frame_hop: float = 0.010
    frame_window: float = 0.025


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, nfft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters on the HTK mel scale from 0 Hz to Nyquist.

    Filter edges are snapped to FFT bins ``floor((nfft + 1) * f / sr)``.
    Returns an ``(n_mels, nfft // 2 + 1)`` matrix.
    """
    mels = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    bins = np.floor((nfft + 1) * mel_to_hz(mels) / sample_rate).astype(int)
    fb = np.zeros((n_mels, nfft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = bins[m], bins[m + 1], bins[m + 2]
        for k in range(lo, mid):
            fb[m, k] = (k - lo) / (mid - lo)
        for k in range(mid, hi):
            fb[m, k] = (hi - k) / (hi - mid)
    return fb


def frame_count(n_samples: int, window: int, hop: int) -> int:
    return 1 + (n_samples - window) // hop


def compute_mfcc(waveform, sample_rate: int, window_s: float = 0.025, hop_s: float = 0.010,
                 n_mels: int = N_MELS) -> MfccMatrix:
    """Pre-emphasis, Hamming window, power spectrum, mel filters, log, DCT-II (orthonormal)."""
    if sample_rate < 8000:
        raise ValidationError(f"sample_rate must be >= 8000 Hz, got {sample_rate}")
    x = np.asarray(waveform, dtype=np.float64).ravel()
    window = int(round(window_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if len(x) < window:
        raise ValidationError(f"waveform has {len(x)} samples, shorter than one {window}-sample window")
    x = np.append(x[0], x[1:] - PREEMPHASIS * x[:-1])
    n_frames = frame_count(len(x), window, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(window)
    nfft = 1 << (window - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, nfft)) ** 2 / nfft
    energies = power @ mel_filterbank(sample_rate, nfft, n_mels).T
    logmel = np.log(np.maximum(energies, LOG_FLOOR))
    coeffs = dct(logmel, type=2, axis=1, norm="ortho")[:, :N_MFCC]
    return MfccMatrix(coeffs, frame_hop=hop / sample_rate, frame_window=window / sample_rate)


def align_mfcc_to_video(mfcc: MfccMatrix, fps: float, T: int) -> np.ndarray:
    """Give video frame ``t`` the four MFCC rows starting at ``round(t * 100 / fps)``.

    Rows past the end of the MFCC matrix are zero. Output is ``(T, 4, 13)``.
    """
    if T <= 0:
        raise ValidationError("T must be positive")
    if not math.isclose(mfcc.frame_hop, 0.010, rel_tol=1e-6):
        raise ValidationError(f"alignment expects a 10 ms hop, got {mfcc.frame_hop}")
    values = np.asarray(mfcc.values, dtype=np.float64).reshape(-1, N_MFCC)
    out = np.zeros((T, 4, N_MFCC))
    rate = 1.0 / mfcc.frame_hop
    for t in range(T):
        start = int(math.floor(t * rate / fps + 0.5))
        rows = values[start:start + 4]
        out[t, : len(rows)] = rows
    return out
