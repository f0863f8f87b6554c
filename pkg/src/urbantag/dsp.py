"""Waveform to log-mel spectrogram conversion.

The analysis chain is: reflect-padded short-time Fourier transform with a
periodic Hann window, triangular mel filterbank on the power spectrum,
log10 with a small floor, then per-clip standardization to zero mean and
unit variance.  Everything is deterministic: the same samples and config
always produce bit-identical features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DspError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise DspError(f"waveform must be mono (1-D), got shape {self.samples.shape}")


@dataclass(frozen=True)
class FeatureConfig:
    """STFT / mel analysis parameters.

    ``fft_size`` of ``None`` means "equal to window_length", which keeps
    FFT bin spacing tied directly to the analysis window.
    """

    window_length: int = 2560
    hop_length: int = 694
    n_mels: int = 128
    f_min: float = 20.0
    f_max: float = 22050.0
    fft_size: int | None = None
    log_floor: float = 1e-10

    def resolved_fft_size(self) -> int:
        return self.window_length if self.fft_size is None else self.fft_size

    def validate(self, sample_rate: int | None = None) -> None:
        if self.n_mels < 1:
            raise DspError("n_mels must be >= 1")
        if not (0 <= self.f_min < self.f_max):
            raise DspError(f"need 0 <= f_min < f_max, got [{self.f_min}, {self.f_max}]")
        if sample_rate is not None and self.f_max > sample_rate / 2:
            raise DspError(f"f_max {self.f_max} exceeds Nyquist {sample_rate / 2}")
        if not (0 < self.hop_length <= self.window_length <= self.resolved_fft_size()):
            raise DspError("need 0 < hop_length <= window_length <= fft_size")
        if self.log_floor <= 0:
            raise DspError("log_floor must be positive")


@dataclass(frozen=True)
class Spectrogram:
    """Log-mel energy grid, shape (n_mels, n_frames)."""

    values: np.ndarray
    config: FeatureConfig | None = None

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window: w[i] = 0.5 * (1 - cos(2*pi*i/n))."""
    if n < 1:
        raise DspError("window length must be >= 1")
    i = np.arange(n, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / n))


def stft_power(waveform: Waveform, config: FeatureConfig) -> np.ndarray:
    """One-sided power spectrogram, shape (fft_size//2 + 1, n_frames).

    Frames are centered: the signal is reflect-padded by fft_size//2 on
    both ends and frame t covers the window centered at sample t*hop.
    n_frames = 1 + len(samples) // hop_length.
    """
    config.validate(waveform.sample_rate)
    x = np.asarray(waveform.samples, dtype=np.float64)
    if x.size < 1:
        raise DspError("waveform must contain at least one sample")
    n_fft = config.resolved_fft_size()
    hop = config.hop_length
    win_len = config.window_length
    window = hann_window(win_len)

    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect") if x.size > 1 else np.pad(x, pad, mode="edge")
    n_frames = 1 + x.size // hop

    # Extract win_len samples centered within each fft_size span.
    offset = (n_fft - win_len) // 2
    frames = np.empty((n_frames, win_len), dtype=np.float64)
    for t in range(n_frames):
        start = t * hop + offset
        frames[t] = xp[start:start + win_len]
    frames *= window
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return (spec.real**2 + spec.imag**2).T


def mel_from_hz(f):
    """Convert Hz to mel: 2595 * log10(1 + f/700)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise DspError("frequency must be non-negative")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def hz_from_mel(m):
    m = np.asarray(m, dtype=np.float64)
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filterbank(config: FeatureConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, fft_size//2 + 1).

    Filter peaks sit at n_mels mel-equally-spaced points strictly between
    f_min and f_max; each triangle spans its two neighboring grid points
    and has unit peak height.
    """
    config.validate(sample_rate)
    n_fft = config.resolved_fft_size()
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins, dtype=np.float64) * sample_rate / n_fft

    grid = np.linspace(mel_from_hz(config.f_min), mel_from_hz(config.f_max), config.n_mels + 2)
    hz_pts = hz_from_mel(grid)

    fb = np.zeros((config.n_mels, n_bins), dtype=np.float64)
    for m in range(config.n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        if not np.any(fb[m] > 0):
            raise DspError(
                f"mel filter {m} has no nonzero weight: n_mels={config.n_mels} "
                f"too large for fft_size={n_fft} at {sample_rate} Hz"
            )
    return fb


def log_mel(waveform: Waveform, config: FeatureConfig) -> Spectrogram:
    """Standardized log-mel spectrogram, shape (n_mels, n_frames).

    values = log10(filterbank @ power + log_floor), then shifted/scaled to
    zero mean and unit variance over the whole clip.  A degenerate clip
    with zero variance (e.g. silence) maps to all zeros.
    """
    power = stft_power(waveform, config)
    fb = mel_filterbank(config, waveform.sample_rate)
    values = np.log10(fb @ power + config.log_floor)
    std = values.std()
    if std == 0.0:
        values = np.zeros_like(values)
    else:
        values = (values - values.mean()) / std
    return Spectrogram(values=values.astype(np.float32), config=config)


# ---------------------------------------------------------------------------
# WAV ingestion (RIFF/WAVE, PCM 16-bit or IEEE float 32-bit, mono)

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def read_wav(path: str | Path) -> Waveform:
    """Decode a RIFF/WAVE file into a normalized mono waveform.

    Supports PCM 16-bit and IEEE float 32-bit encodings.  Stereo and other
    multi-channel files are rejected; the expected field recordings are
    mono.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DspError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise DspError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or payload is None:
        raise DspError(f"{path}: missing fmt or data chunk")
    audio_format, n_channels, sample_rate, _, _, bits = fmt
    if audio_format == _WAVE_FORMAT_EXTENSIBLE:
        raise DspError(f"{path}: extensible WAV format not supported")
    if n_channels != 1:
        raise DspError(f"{path}: expected mono audio, got {n_channels} channels")

    if audio_format == _WAVE_FORMAT_PCM and bits == 16:
        samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise DspError(f"{path}: unsupported encoding (format={audio_format}, bits={bits})")
    if samples.size == 0:
        raise DspError(f"{path}: empty data chunk")
    return Waveform(samples=samples, sample_rate=sample_rate)


def write_wav_pcm16(path: str | Path, waveform: Waveform) -> None:
    """Write a mono waveform as PCM 16-bit, clipping to [-1, 1]."""
    x = np.clip(np.asarray(waveform.samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2").tobytes()
    sr = waveform.sample_rate
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _WAVE_FORMAT_PCM, 1, sr, sr * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(pcm))
    Path(path).write_bytes(header + pcm)


# ---------------------------------------------------------------------------
# Feature file container: magic, version, dims, then row-major float32 LE.

FEATURE_MAGIC = b"USTF"
FEATURE_VERSION = 1


def write_features(path: str | Path, spec: Spectrogram) -> None:
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, values.shape[0], values.shape[1])
    Path(path).write_bytes(header + values.tobytes())


def read_features(path: str | Path) -> Spectrogram:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise DspError(f"{path}: not a feature file")
    version, n_mels, n_frames = struct.unpack_from("<III", data, 4)
    if version != FEATURE_VERSION:
        raise DspError(f"{path}: unknown feature file version {version}")
    expected = 16 + 4 * n_mels * n_frames
    if len(data) != expected:
        raise DspError(f"{path}: truncated feature file ({len(data)} bytes, expected {expected})")
    values = np.frombuffer(data, dtype="<f4", offset=16).reshape(n_mels, n_frames)
    return Spectrogram(values=values.copy())
