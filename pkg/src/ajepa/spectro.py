"""Audio frontend: WAV decoding, log-mel spectrograms, augmentation, patching.

The pipeline turns a 16 kHz waveform into a standardized log-mel grid of
``target_frames x n_mels``, then cuts it into non-overlapping 16x16 patches
in raster (time-major) order. Pretraining additionally applies a cyclic
time crop and a single +/- dB gain jitter per clip before standardization.
"""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DecodeError,
    EmptyInputError,
    ShapeError,
    UnsupportedFormatError,
)

SAMPLE_RATE = 16_000


@dataclass(frozen=True)
class Waveform:
    """Mono audio at 16 kHz with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        if self.samples.ndim != 1:
            raise ShapeError("waveform samples must be 1-D")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ConfigError("waveform contains non-finite samples")


@dataclass(frozen=True)
class FrontendConfig:
    """Geometry and augmentation parameters of the spectrogram frontend.

    ``target_frames`` is 1024 at full scale (10 s clips) and 128 by default
    here (1.28 s), which yields an 8x8 patch grid with 16x16 patches.
    """

    n_mels: int = 128
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    target_frames: int = 128
    patch: tuple[int, int] = (16, 16)  # (frames, mel bins) per patch
    jitter_db: float = 6.0
    log_floor: float = 1e-10

    def __post_init__(self):
        ph, pw = self.patch
        if self.target_frames % ph != 0:
            raise ConfigError("target_frames must be divisible by patch height")
        if self.n_mels % pw != 0:
            raise ConfigError("n_mels must be divisible by patch width")
        if self.fft_size < self.win_samples:
            raise ConfigError("fft_size must cover one analysis window")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def win_samples(self) -> int:
        return int(round(self.win_ms * SAMPLE_RATE / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * SAMPLE_RATE / 1000.0))

    @property
    def grid(self) -> tuple[int, int]:
        """Patch grid as (time rows, frequency cols)."""
        return self.target_frames // self.patch[0], self.n_mels // self.patch[1]


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-energy grid of shape [target_frames x n_mels]."""

    values: np.ndarray
    frame_hop_ms: float = 10.0

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError("spectrogram must be 2-D [frames x mels]")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("spectrogram contains non-finite entries")


@dataclass(frozen=True)
class PatchGrid:
    """Flattened non-overlapping patches in time-major raster order."""

    tokens: np.ndarray  # [rows*cols, patch_h*patch_w]
    grid: tuple[int, int]  # (rows, cols)
    patch: tuple[int, int] = (16, 16)

    def __post_init__(self):
        rows, cols = self.grid
        ph, pw = self.patch
        if self.tokens.shape != (rows * cols, ph * pw):
            raise ShapeError(
                f"tokens shape {self.tokens.shape} does not match grid "
                f"{self.grid} with patch {self.patch}"
            )


# ---------------------------------------------------------------------------
# WAV decoding
# ---------------------------------------------------------------------------

def decode_wav(data: bytes) -> Waveform:
    """Decode PCM16 RIFF/WAVE bytes to a mono 16 kHz waveform.

    Stereo is averaged to mono; other sample rates are resampled by linear
    interpolation. int16 values are scaled by 1/32768.
    """
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            framerate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(f"unsupported WAV codec: {msg}") from exc
        raise DecodeError(f"malformed WAV data: {msg}") from exc

    if sampwidth != 2:
        raise UnsupportedFormatError(
            f"only 16-bit PCM is supported, got {8 * sampwidth}-bit"
        )
    if n_channels not in (1, 2):
        raise UnsupportedFormatError(f"expected mono or stereo, got {n_channels} channels")

    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels == 2:
        pcm = pcm.reshape(-1, 2).mean(axis=1)
    if framerate != SAMPLE_RATE:
        pcm = _resample_linear(pcm, framerate, SAMPLE_RATE)
    return Waveform(samples=pcm, sample_rate_hz=SAMPLE_RATE)


def _resample_linear(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Linear-interpolation resampling preserving the first and last sample."""
    if x.size == 0:
        return x
    if sr_in == sr_out or x.size == 1:
        return x.copy() if sr_in == sr_out else x[:1].copy()
    n_out = int(np.floor((x.size - 1) * sr_out / sr_in)) + 1
    positions = np.arange(n_out) * (sr_in / sr_out)
    return np.interp(positions, np.arange(x.size), x)


def encode_wav(samples: np.ndarray, sample_rate_hz: int = SAMPLE_RATE) -> bytes:
    """Encode float samples in [-1, 1] as mono PCM16 WAV bytes."""
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate_hz)
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Mel filterbank
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers_hz(cfg: FrontendConfig) -> np.ndarray:
    """Center frequency of each triangular filter, strictly increasing."""
    mel_pts = np.linspace(0.0, float(hz_to_mel(SAMPLE_RATE / 2)), cfg.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular mel filterbank of shape [n_mels, fft_size//2 + 1].

    Triangles are linear on the mel scale between equally spaced mel points
    spanning 0..8000 Hz. Each weight is the triangle averaged over the STFT
    bin's bandwidth (midpoint rule, 8 sub-points) rather than sampled at the
    bin center; at 128 bands the lowest triangles are narrower than one bin,
    and bandwidth averaging keeps every filter's response strictly positive.
    """
    n_freqs = cfg.fft_size // 2 + 1
    bin_hz = SAMPLE_RATE / cfg.fft_size
    mel_pts = np.linspace(0.0, float(hz_to_mel(SAMPLE_RATE / 2)), cfg.n_mels + 2)

    # 8 sub-points per bin, clipped to the analyzable band.
    offsets = (np.arange(8) + 0.5) / 8.0 - 0.5
    sub_hz = np.arange(n_freqs)[:, None] * bin_hz + offsets[None, :] * bin_hz
    sub_mel = hz_to_mel(np.clip(sub_hz, 0.0, SAMPLE_RATE / 2))

    lo = mel_pts[:-2][:, None, None]
    ctr = mel_pts[1:-1][:, None, None]
    hi = mel_pts[2:][:, None, None]
    up = (sub_mel[None] - lo) / (ctr - lo)
    down = (hi - sub_mel[None]) / (hi - ctr)
    tri = np.maximum(0.0, np.minimum(up, down))
    return tri.mean(axis=2)


# ---------------------------------------------------------------------------
# Spectrogram pipeline
# ---------------------------------------------------------------------------

def mel_frames(w: Waveform, cfg: FrontendConfig) -> np.ndarray:
    """Full-length log-mel frames [n_frames x n_mels], unnormalized.

    Frames are Hann-windowed with ``win_samples`` length and ``hop_samples``
    hop; the power spectrum (magnitude squared) of size fft_size//2+1 feeds
    the filterbank, and energies are floored before the natural log.
    """
    if w.sample_rate_hz != SAMPLE_RATE:
        raise ConfigError(f"waveform must be at {SAMPLE_RATE} Hz")
    win, hop = cfg.win_samples, cfg.hop_samples
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size < win:
        raise EmptyInputError(
            f"waveform of {x.size} samples is shorter than one {win}-sample window"
        )
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win)[None, :]
    spectrum = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    energy = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energy, cfg.log_floor))


def fix_length(frames: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Crop from the start or pad with silence to ``target_frames`` frames."""
    n, target = frames.shape[0], cfg.target_frames
    if n >= target:
        return frames[:target]
    pad = np.full((target - n, frames.shape[1]), np.log(cfg.log_floor))
    return np.concatenate([frames, pad], axis=0)


def standardize(values: np.ndarray) -> np.ndarray:
    """Shift/scale to zero mean, unit variance; constant inputs map to zeros."""
    mean = values.mean()
    std = values.std()
    if std < 1e-12:
        return np.zeros_like(values)
    return (values - mean) / std


def log_mel(w: Waveform, cfg: FrontendConfig) -> MelSpectrogram:
    """Evaluation-path spectrogram: frames, length fix, standardization."""
    values = standardize(fix_length(mel_frames(w, cfg), cfg))
    return MelSpectrogram(values=values, frame_hop_ms=cfg.hop_ms)


def cyclic_crop_jitter(
    frames: np.ndarray, cfg: FrontendConfig, rng: np.random.Generator
) -> np.ndarray:
    """Pretraining augmentation on full-length frames.

    Picks a uniform start frame and wraps cyclically to ``target_frames``
    (short inputs tile), then adds one scalar gain drawn uniformly from
    [-jitter_db, +jitter_db], converted to the log-energy domain as
    ln(10^(g/20)). Returns unstandardized frames.
    """
    if frames.shape[0] == 0:
        raise EmptyInputError("no frames to crop")
    start = int(rng.integers(0, frames.shape[0]))
    idx = (start + np.arange(cfg.target_frames)) % frames.shape[0]
    gain_db = float(rng.uniform(-cfg.jitter_db, cfg.jitter_db))
    return frames[idx] + gain_db * np.log(10.0) / 20.0


def pretrain_spectrogram(
    w: Waveform, cfg: FrontendConfig, rng: np.random.Generator
) -> MelSpectrogram:
    """Pretraining-path spectrogram: frames, cyclic crop + jitter, standardize."""
    values = standardize(cyclic_crop_jitter(mel_frames(w, cfg), cfg, rng))
    return MelSpectrogram(values=values, frame_hop_ms=cfg.hop_ms)


# ---------------------------------------------------------------------------
# Patching and positions
# ---------------------------------------------------------------------------

def patchify(m: MelSpectrogram | np.ndarray, cfg: FrontendConfig) -> PatchGrid:
    """Cut the spectrogram into non-overlapping patches, time-major raster.

    Patch (r, c) holds frames [ph*r, ph*r+ph) x bins [pw*c, pw*c+pw),
    flattened row-major, at raster index r*cols + c.
    """
    values = m.values if isinstance(m, MelSpectrogram) else m
    ph, pw = cfg.patch
    n_frames, n_mels = values.shape
    if n_frames % ph != 0 or n_mels % pw != 0:
        raise ShapeError(
            f"spectrogram {values.shape} not divisible by patch {cfg.patch}"
        )
    rows, cols = n_frames // ph, n_mels // pw
    tokens = (
        values.reshape(rows, ph, cols, pw)
        .transpose(0, 2, 1, 3)
        .reshape(rows * cols, ph * pw)
    )
    return PatchGrid(tokens=tokens, grid=(rows, cols), patch=(ph, pw))


def unpatchify(g: PatchGrid) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    rows, cols = g.grid
    ph, pw = g.patch
    return (
        g.tokens.reshape(rows, cols, ph, pw)
        .transpose(0, 2, 1, 3)
        .reshape(rows * ph, cols * pw)
    )


def sincos_positions(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed factorized 2-D sin/cos positional encodings [rows*cols x dim].

    The first dim/2 channels encode the time (row) index and the last dim/2
    the frequency (column) index. Within each half, channels interleave
    sin/cos at geometrically spaced inverse frequencies 10000^(-2j/half).
    """
    if dim % 4 != 0:
        raise ConfigError("positional dim must be divisible by 4")
    rows, cols = grid
    r_idx, c_idx = np.divmod(np.arange(rows * cols), cols)
    half = dim // 2
    out = np.empty((rows * cols, dim), dtype=np.float64)
    out[:, :half] = _sincos_1d(r_idx, half)
    out[:, half:] = _sincos_1d(c_idx, half)
    return out


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    j = np.arange(dim // 2, dtype=np.float64)
    inv_freq = 10000.0 ** (-2.0 * j / dim)
    angles = pos[:, None].astype(np.float64) * inv_freq[None, :]
    out = np.empty((pos.size, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out
