"""Raw audio clips to normalized log-mel matrices.

A canonical clip is 10 s of mono audio at 16 kHz. It is framed with a
periodic Hann window of 1024 samples and a hop of 400, center-padded so a
160000-sample clip yields 401 frames; the last frame is dropped to land on
exactly 400 frames. Power spectra are projected onto 64 triangular HTK-mel
filters spanning 0-8000 Hz and floored at 1e-10 before the natural log.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, MediaIOError, ShapeError

SAMPLE_RATE = 16000
FRAME_SIZE = 1024
HOP = 400
N_MELS = 64
TARGET_FRAMES = 400
POWER_FLOOR = 1e-10


def fft_real(frame: np.ndarray) -> np.ndarray:
    """One-sided spectrum (513 complex bins) of a 1024-sample real frame."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (FRAME_SIZE,):
        raise ShapeError(f"fft_real expects {FRAME_SIZE} samples, got {frame.shape}")
    return np.fft.rfft(frame)


def hann_window(n: int = FRAME_SIZE) -> np.ndarray:
    # periodic variant, the usual STFT convention
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(samples: np.ndarray, window: int = FRAME_SIZE, hop: int = HOP,
               center: bool = True) -> np.ndarray:
    """Hann-windowed power spectrogram, frames x 513.

    With ``center`` the clip is padded by window//2 zeros on each side and
    the frame count is floor(len/hop) + 1; without, frames are taken only
    where they fit fully: floor((len - window)/hop) + 1.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size < window:
        raise InputError(f"clip too short for a {window}-sample window")
    if center:
        padded = np.pad(samples, (window // 2, window // 2))
        count = samples.size // hop + 1
    else:
        padded = samples
        count = (samples.size - window) // hop + 1
    win = hann_window(window)
    idx = np.arange(window)[None, :] + hop * np.arange(count)[:, None]
    frames = padded[idx] * win
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real ** 2 + spec.imag ** 2)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = FRAME_SIZE,
                   sample_rate: int = SAMPLE_RATE, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular mel filters as an (n_mels, n_fft//2 + 1) weight matrix."""
    if fmax is None:
        fmax = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_freqs(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE,
                     fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    if fmax is None:
        fmax = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def log_mel(power_spec: np.ndarray, filterbank: np.ndarray,
            target_frames: int | None = TARGET_FRAMES) -> np.ndarray:
    """Project a power spectrogram onto the filterbank and take the log.

    The frame axis is trimmed (from the end) or padded (with the log floor)
    to ``target_frames`` when given.
    """
    power_spec = np.asarray(power_spec, dtype=np.float64)
    if power_spec.ndim != 2 or power_spec.shape[1] != filterbank.shape[1]:
        raise ShapeError(f"spectrogram width {power_spec.shape} does not match "
                         f"filterbank {filterbank.shape}")
    mel = power_spec @ filterbank.T
    out = np.log(np.maximum(mel, POWER_FLOOR))
    if target_frames is not None:
        if out.shape[0] >= target_frames:
            out = out[:target_frames]
        else:
            pad = np.full((target_frames - out.shape[0], out.shape[1]),
                          np.log(POWER_FLOOR))
            out = np.vstack([out, pad])
    return out


_FILTERBANK_CACHE: dict[tuple, np.ndarray] = {}


def clip_features(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Full pipeline: resample if needed, STFT, log-mel, 400 x 64 output."""
    if sample_rate != SAMPLE_RATE:
        samples = resample_linear(samples, sample_rate, SAMPLE_RATE)
    key = (N_MELS, FRAME_SIZE, SAMPLE_RATE)
    fb = _FILTERBANK_CACHE.get(key)
    if fb is None:
        fb = _FILTERBANK_CACHE[key] = mel_filterbank()
    return log_mel(stft_power(samples), fb)


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return np.asarray(samples, dtype=np.float64)
    n_out = int(round(len(samples) * dst_rate / src_rate))
    t_out = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(t_out, np.arange(len(samples)), samples)


@dataclass
class Normalizer:
    """Per-mel-bin standardisation statistics fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray
    clamped_dims: list[int] = field(default_factory=list)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std


def fit_normalizer(corpus: list[np.ndarray]) -> Normalizer:
    """Population mean/std per mel bin over every frame of every clip."""
    if not corpus:
        raise InputError("cannot fit a normalizer on an empty corpus")
    stacked = np.concatenate([np.asarray(c, dtype=np.float64) for c in corpus], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    # "zero" variance up to float noise from the mean subtraction
    dead = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    clamped = [int(i) for i in np.flatnonzero(dead)]
    if clamped:
        std = std.copy()
        std[dead] = 1.0
    return Normalizer(mean=mean, std=std, clamped_dims=clamped)


def save_normalizer(out_dir: str | Path, norm: Normalizer) -> None:
    from .tensorio import save_tensor
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_tensor(out_dir / "normalizer_mean.avtl", norm.mean)
    save_tensor(out_dir / "normalizer_std.avtl", norm.std)
    (out_dir / "normalizer.json").write_text(
        json.dumps({"clamped_dims": norm.clamped_dims}) + "\n")


def load_normalizer(out_dir: str | Path) -> Normalizer:
    from .tensorio import load_tensor
    out_dir = Path(out_dir)
    meta_path = out_dir / "normalizer.json"
    if not meta_path.exists():
        raise InputError(f"no normalizer at {out_dir}")
    meta = json.loads(meta_path.read_text())
    return Normalizer(mean=load_tensor(out_dir / "normalizer_mean.avtl"),
                      std=load_tensor(out_dir / "normalizer_std.avtl"),
                      clamped_dims=list(meta["clamped_dims"]))


# ---------------------------------------------------------------------------
# WAV files: PCM16 mono

def write_wav(path: str | Path, samples: np.ndarray,
              sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise MediaIOError(f"{path}: expected mono PCM16")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except FileNotFoundError as e:
        raise MediaIOError(f"missing audio file {path}") from e
    except wave.Error as e:
        raise MediaIOError(f"{path}: {e}") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return samples, rate
