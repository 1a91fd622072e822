"""Waveform padding, log-mel frontend, toy encoder and the WSQF feature-file format.

The quality predictor consumes a per-utterance stack of encoder-layer features
of shape [L, T, F].  Stacks produced by a real foundation-model encoder are
expensive, so this module also ships a deterministic toy encoder that turns a
log-mel spectrogram into a stack with the same geometry, letting every
downstream component run at desk scale.

Stacks are persisted in the "WSQF" binary format: a little-endian header
(magic, version, L, T, F, valid_frames, dtype code) followed by the row-major
float32 payload.  Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
PAD_SECONDS = 30.0
LOG_FLOOR = 1e-10

WSQF_MAGIC = b"WSQF"
WSQF_VERSION = 1
DTYPE_F32 = 0

# magic(4s) version(u16) L(u32) T(u32) F(u32) valid_frames(u32) dtype(u8)
_HEADER = struct.Struct("<4sHIIIIB")


class FeatureFileError(ValueError):
    """Base class for WSQF read failures."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


class UnsupportedDtypeError(FeatureFileError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Mono audio at a fixed sample rate (inputs must already be 16 kHz)."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    win_s: float = 0.025
    hop_s: float = 0.010


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel energies, one row per frame."""

    frames: np.ndarray  # [T_mel, n_mels]
    hop_s: float
    win_s: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("mel frames contain non-finite values")
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class FeatureStack:
    """Per-layer encoder features, shape [L, T, F].

    valid_frames counts the leading frames that carry energy from the unpadded
    audio; the remainder stem from the zero-padded tail.  Data is kept in the
    dtype it was built with; WSQF persistence always stores float32.
    """

    data: np.ndarray
    valid_frames: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"stack must be [L, T, F], got shape {data.shape}")
        if data.shape[0] < 1:
            raise ValueError("stack needs at least one layer")
        if not np.all(np.isfinite(data)):
            raise ValueError("stack contains non-finite values")
        if not 0 <= self.valid_frames <= data.shape[1]:
            raise ValueError(
                f"valid_frames {self.valid_frames} outside [0, {data.shape[1]}]"
            )
        object.__setattr__(self, "data", data)

    @property
    def layer_count(self) -> int:
        return self.data.shape[0]

    @property
    def frame_count(self) -> int:
        return self.data.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.data.shape[2]


def pad_or_trim(w: Waveform, target_s: float = PAD_SECONDS) -> Waveform:
    """Zero-pad at the end or truncate so the waveform lasts exactly target_s."""
    if target_s <= 0:
        raise ValueError(f"target_s must be positive, got {target_s}")
    n_target = int(round(target_s * w.sample_rate))
    n = w.samples.size
    if n == n_target:
        return w
    if n > n_target:
        return Waveform(w.samples[:n_target], w.sample_rate)
    out = np.zeros(n_target, dtype=np.float64)
    out[:n] = w.samples
    return Waveform(out, w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters over rfft bins, rows sum over a triangle each."""
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, fft_freqs.size))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (fft_freqs - lo) / (ctr - lo)
        falling = (hi - fft_freqs) / (hi - ctr)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def compute_log_mel(w: Waveform, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    """Natural-log mel spectrogram with T_mel = ceil(len / hop) frames.

    The signal is framed from sample 0 in hop-sized steps; the tail is
    zero-extended so the final frames are full windows.  Power below
    LOG_FLOOR is clamped, so pure silence maps to a constant frame.
    """
    if w.samples.size == 0:
        raise ValueError("cannot compute mel spectrogram of an empty waveform")
    win = int(round(cfg.win_s * w.sample_rate))
    hop = int(round(cfg.hop_s * w.sample_rate))
    n = w.samples.size
    t_mel = -(-n // hop)  # ceil
    needed = (t_mel - 1) * hop + win
    x = np.zeros(needed, dtype=np.float64)
    x[:n] = w.samples
    idx = np.arange(win)[None, :] + hop * np.arange(t_mel)[:, None]
    frames = x[idx] * np.hanning(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=win, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, win, w.sample_rate)
    mel_power = power @ fb.T
    log_mel = np.log(np.maximum(mel_power, LOG_FLOOR))
    return MelSpectrogram(log_mel, hop_s=cfg.hop_s, win_s=cfg.win_s)


def _segment_means(frames: np.ndarray, t_out: int) -> np.ndarray:
    """Average the time axis down (or resample up) to t_out rows."""
    t_in = frames.shape[0]
    out = np.empty((t_out, frames.shape[1]), dtype=np.float64)
    for i in range(t_out):
        start = (i * t_in) // t_out
        end = max(start + 1, ((i + 1) * t_in) // t_out)
        out[i] = frames[start:end].mean(axis=0)
    return out


def _valid_mel_frames(frames: np.ndarray) -> int:
    """Index one past the last frame with energy above the log floor."""
    floor = np.log(LOG_FLOOR)
    has_energy = np.any(frames != floor, axis=1)
    if not has_energy.any():
        return 0
    return int(np.max(np.nonzero(has_energy)[0])) + 1


def toy_encode(
    m: MelSpectrogram, seed: int, dims: tuple[int, int, int] | None = None
) -> FeatureStack:
    """Deterministic stand-in for a real encoder.

    Each layer applies its own seeded random projection of the time-reduced
    mel frames plus an index-dependent mixing term, so the layers are distinct
    and fusion weights over them are identifiable.  The output depends only on
    (m, seed, dims).  Default dims follow the reference geometry: 13 layers,
    768 features, and half the mel frame count (the stride-2 front end that
    turns 3000 mel frames into 1500).
    """
    if dims is None:
        dims = (13, max(1, m.frames.shape[0] // 2), 768)
    layer_count, frame_count, feature_dim = dims
    if layer_count <= 0 or frame_count <= 0 or feature_dim <= 0:
        raise ValueError(f"dims must all be positive, got {dims}")
    t_mel, n_mels = m.frames.shape
    reduced = _segment_means(m.frames, frame_count)
    layers = []
    for layer in range(layer_count):
        rng = np.random.default_rng([seed, layer])
        w = rng.normal(size=(n_mels, feature_dim)) / np.sqrt(n_mels)
        b = 0.1 * rng.normal(size=feature_dim)
        hidden = reduced @ w + b
        mixed = np.tanh(hidden) + 0.05 * layer * np.tanh(np.roll(hidden, layer, axis=0))
        layers.append(mixed.astype(np.float32))
    valid_mel = _valid_mel_frames(m.frames)
    valid = min(frame_count, -(-valid_mel * frame_count // t_mel))
    return FeatureStack(np.stack(layers), valid_frames=valid)


@dataclass(frozen=True)
class FeatureFileHeader:
    """Decoded WSQF header; payload is layer_count*frame_count*feature_dim*4 bytes."""

    magic: bytes
    version: int
    layer_count: int
    frame_count: int
    feature_dim: int
    valid_frames: int
    dtype_code: int


def _decode_header(blob: bytes, path) -> FeatureFileHeader:
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the WSQF header")
    magic, version, layers, frames, feats, valid, dtype_code = _HEADER.unpack_from(blob)
    header = FeatureFileHeader(magic, version, layers, frames, feats, valid, dtype_code)
    if header.magic != WSQF_MAGIC:
        raise BadMagicError(f"{path}: bad magic {header.magic!r}, expected {WSQF_MAGIC!r}")
    if header.version != WSQF_VERSION:
        raise VersionMismatchError(
            f"{path}: version {header.version}, reader supports {WSQF_VERSION}"
        )
    if header.dtype_code != DTYPE_F32:
        raise UnsupportedDtypeError(f"{path}: unsupported dtype code {header.dtype_code}")
    return header


def read_feature_header(path: str | Path) -> FeatureFileHeader:
    """Decode and validate just the header of a WSQF file."""
    with open(path, "rb") as fh:
        blob = fh.read(_HEADER.size)
    return _decode_header(blob, path)


def save_feature_stack(s: FeatureStack, path: str | Path) -> None:
    """Write a stack as WSQF (header + row-major float32 payload)."""
    layer_count, frame_count, feature_dim = s.data.shape
    header = _HEADER.pack(
        WSQF_MAGIC,
        WSQF_VERSION,
        layer_count,
        frame_count,
        feature_dim,
        s.valid_frames,
        DTYPE_F32,
    )
    payload = np.ascontiguousarray(s.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_feature_stack(path: str | Path, dtype=np.float32) -> FeatureStack:
    """Read a WSQF file; raises a distinct error per corruption mode."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = _decode_header(blob, path)
    expected = header.layer_count * header.frame_count * header.feature_dim * 4
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(
        header.layer_count, header.frame_count, header.feature_dim
    )
    return FeatureStack(data.astype(dtype), valid_frames=header.valid_frames)
