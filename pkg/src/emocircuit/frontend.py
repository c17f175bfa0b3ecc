"""Media front end: 300 ms face clips and 1 s MFCC maps.

Face detection and cropping happen upstream; frames arrive as grayscale
arrays already centred on the face.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError

SAMPLE_RATE = 16000
CLIP_SAMPLES = SAMPLE_RATE
FPS = 30
CLIP_FRAMES = 9
FRAME_SIZE = 128

WIN_MS = 25
HOP_MS = 10
N_FFT = 1024
N_MELS = 26
N_MFCC = 26
N_TIME = 35
LOG_FLOOR = 1e-10
FMIN, FMAX = 0.0, 8000.0


# ---------------------------------------------------------------------------
# visual


def validate_visual_clip(clip: np.ndarray, frame_size: int | None = FRAME_SIZE) -> np.ndarray:
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 3 or clip.shape[0] != CLIP_FRAMES:
        raise ShapeError(f"visual clip must be {CLIP_FRAMES} frames, got shape {clip.shape}")
    if clip.shape[1] != clip.shape[2] or (frame_size is not None and clip.shape[1] != frame_size):
        raise ShapeError(f"visual frames must be {frame_size}x{frame_size}, got {clip.shape[1:]}")
    if clip.min() < 0 or clip.max() > 1:
        raise ValidationError("visual intensities must lie in [0, 1]")
    return clip


def assemble_visual_clip(frames: Sequence[np.ndarray], seed=None, mode: str = "train") -> np.ndarray:
    """Cut a contiguous 9-frame (300 ms at 30 fps) window out of a 1 s stream.

    Training draws the window start uniformly; inference takes the centred
    window.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = len(frames)
    if n < CLIP_FRAMES:
        raise ValidationError(f"need at least {CLIP_FRAMES} frames, got {n}")
    if mode == "infer":
        start = (n - CLIP_FRAMES) // 2
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        start = int(rng.integers(0, n - CLIP_FRAMES + 1))
    return frames[start:start + CLIP_FRAMES].copy()


def downsample_frames(clip: np.ndarray, size: int) -> np.ndarray:
    """Block-average each frame down to ``size x size`` (size must divide the frame)."""
    clip = np.asarray(clip, dtype=np.float64)
    h = clip.shape[-1]
    if h == size:
        return clip
    if h % size:
        raise ShapeError(f"frame size {h} is not a multiple of {size}")
    f = h // size
    return clip.reshape(clip.shape[:-2] + (size, f, size, f)).mean(axis=(-3, -1))


def read_frame_blob(buf: bytes, frame_size: int = FRAME_SIZE) -> np.ndarray:
    """One byte per pixel, row-major ``9 x S x S``; scaled to [0, 1]."""
    expected = CLIP_FRAMES * frame_size * frame_size
    if len(buf) != expected:
        raise ValidationError(f"frame blob has {len(buf)} bytes, expected {expected}")
    return np.frombuffer(buf, dtype=np.uint8).reshape(CLIP_FRAMES, frame_size, frame_size) / 255.0


def frame_blob(clip: np.ndarray) -> bytes:
    return np.round(np.asarray(clip) * 255.0).astype(np.uint8).tobytes()


def read_frame_dir(path: str | Path) -> np.ndarray:
    """Load a directory of 8-bit grayscale images, sorted by file name."""
    from PIL import Image

    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in {".png", ".pgm", ".bmp", ".jpg", ".jpeg"})
    if not files:
        raise ValidationError(f"no images in {path}")
    return np.stack([np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0 for p in files])


# ---------------------------------------------------------------------------
# audio


def resample_linear(samples: np.ndarray, rate: int, target: int = SAMPLE_RATE) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if rate == target:
        return samples
    n_out = int(round(len(samples) * target / rate))
    t_out = np.arange(n_out) / target
    t_in = np.arange(len(samples)) / rate
    return np.interp(t_out, t_in, samples)


def read_pcm16(buf: bytes, rate: int = SAMPLE_RATE) -> np.ndarray:
    """16-bit little-endian PCM, any rate -> float samples at 16 kHz, padded/cut to 1 s."""
    if len(buf) % 2:
        raise ValidationError("PCM blob has an odd number of bytes")
    x = np.frombuffer(buf, dtype="<i2").astype(np.float64) / 32767.0
    x = resample_linear(x, rate)
    if len(x) < CLIP_SAMPLES:
        x = np.pad(x, (0, CLIP_SAMPLES - len(x)))
    return x[:CLIP_SAMPLES]


def pcm16_blob(audio: np.ndarray) -> bytes:
    return np.round(np.clip(audio, -1, 1) * 32767.0).astype("<i2").tobytes()


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """DCT-II scaled so coefficient 0 is the mean of the input."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    m = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    m[0] /= n_in
    m[1:] *= 2.0 / n_in
    return m


def _frame(audio: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = 1 + (len(audio) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return audio[idx]


def mfcc_frames(audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Full-rate MFCCs, shape ``(26, 98)`` for a 1 s clip."""
    if sample_rate != SAMPLE_RATE:
        raise ValidationError(f"audio must be sampled at {SAMPLE_RATE} Hz, got {sample_rate}")
    audio = np.asarray(audio, dtype=np.float64)
    if audio.shape != (CLIP_SAMPLES,):
        raise ShapeError(f"audio clip must hold {CLIP_SAMPLES} samples, got {audio.shape}")
    win = SAMPLE_RATE * WIN_MS // 1000
    hop = SAMPLE_RATE * HOP_MS // 1000
    frames = _frame(audio, win, hop) * np.hanning(win)
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    energies = spec @ mel_filterbank().T
    logmel = np.log(np.maximum(energies, LOG_FLOOR))
    return dct_matrix(N_MFCC, N_MELS) @ logmel.T


def subsample_indices(n_frames: int, n_out: int = N_TIME) -> np.ndarray:
    return np.round(np.linspace(0, n_frames - 1, n_out)).astype(int)


def mfcc_extract(audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """26 x 35 MFCC map: 98 frames of 25 ms / 10 ms, uniformly subsampled to 35."""
    full = mfcc_frames(audio, sample_rate)
    return full[:, subsample_indices(full.shape[1])]
