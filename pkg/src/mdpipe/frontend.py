"""Logmel frontend: framing, mel filterbank, global normalization, frame stacking."""

from __future__ import annotations

import functools
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.signal import get_window

from mdpipe.audio import AudioBuffer

FRONTEND_RATE_HZ = 16000

LMFB_MAGIC = b"LMFB"
LMFB_VERSION = 1
_LMFB_HEADER = struct.Struct("<4sIII")


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class FrontendConfig:
    window_ms: float = 32.0
    hop_ms: float = 10.0
    num_mel: int = 128
    fmin_hz: float = 125.0
    fmax_hz: float = 7500.0
    stack: int = 4
    subsample: int = 3
    log_floor: float = 1e-7

    def __post_init__(self):
        if not 0 <= self.fmin_hz < self.fmax_hz <= FRONTEND_RATE_HZ / 2:
            raise FrontendError(f"need 0 <= fmin < fmax <= {FRONTEND_RATE_HZ // 2} Hz")
        if self.stack < 1 or self.subsample < 1:
            raise FrontendError("stack and subsample must be >= 1")
        if self.log_floor <= 0:
            raise FrontendError("log_floor must be positive")

    @property
    def window_length(self) -> int:
        return int(round(self.window_ms * FRONTEND_RATE_HZ / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * FRONTEND_RATE_HZ / 1000.0))

    @property
    def frame_rate_hz(self) -> float:
        return 1000.0 / self.hop_ms


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise FrontendError(f"features must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise FrontendError("features contain non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: FrontendConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz), config.num_mel + 2))
    return edges[1:-1]


@functools.lru_cache(maxsize=8)
def mel_filterbank(config: FrontendConfig) -> np.ndarray:
    """Unit-peak triangular filters, shape (num_mel, n_fft // 2 + 1).

    Filters narrower than one FFT bin would be empty; those take weight 1 on
    the bin nearest their center so every output dimension carries signal.
    """
    n_fft = config.window_length
    freqs = np.arange(n_fft // 2 + 1) * FRONTEND_RATE_HZ / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz), config.num_mel + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    for m in np.nonzero(fb.sum(axis=1) == 0)[0]:
        fb[m, int(np.argmin(np.abs(freqs - center[m, 0])))] = 1.0
    fb.setflags(write=False)
    return fb


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    if x.shape[0] < win:
        x = np.concatenate([x, np.zeros(win - x.shape[0])])
    n_frames = 1 + (x.shape[0] - win) // hop
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]


def num_frames(n_samples: int, config: FrontendConfig = FrontendConfig()) -> int:
    win, hop = config.window_length, config.hop_length
    return 1 + (max(n_samples, win) - win) // hop


def logmel(audio: AudioBuffer, config: FrontendConfig = FrontendConfig()) -> FeatureMatrix:
    """Hann-windowed power spectrum through the mel filterbank, then a floored log.

    One frame per hop; audio shorter than a window is zero-padded to one window.
    """
    if audio.sample_rate_hz != FRONTEND_RATE_HZ:
        raise FrontendError(f"frontend expects {FRONTEND_RATE_HZ} Hz audio, got {audio.sample_rate_hz}")
    if len(audio) == 0:
        raise FrontendError("empty audio")
    win = config.window_length
    frames = _frames(audio.samples, win, config.hop_length) * get_window("hann", win)
    power = np.abs(np.fft.rfft(frames, n=win, axis=1)) ** 2
    mel = power @ mel_filterbank(config).T
    return FeatureMatrix(np.log(np.maximum(mel, config.log_floor)), config.frame_rate_hz)


@dataclass
class NormStats:
    """Running per-dimension mean/variance (Chan et al. pairwise update)."""

    mean: np.ndarray
    m2: np.ndarray
    count: int = 0
    std_floor: float = 1e-5

    @classmethod
    def empty(cls, dim: int = 128, std_floor: float = 1e-5) -> "NormStats":
        return cls(np.zeros(dim), np.zeros(dim), 0, std_floor)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            raise FrontendError("no frames accumulated")
        return np.maximum(np.sqrt(self.m2 / self.count), self.std_floor)

    def update(self, features: FeatureMatrix) -> "NormStats":
        x = np.asarray(features.values, dtype=np.float64)
        if x.shape[1] != self.dim:
            raise FrontendError(f"expected {self.dim}-dim features, got {x.shape[1]}")
        if x.shape[0] == 0:
            return self
        batch_mean = x.mean(axis=0)
        batch = NormStats(batch_mean, ((x - batch_mean) ** 2).sum(axis=0), x.shape[0], self.std_floor)
        return self.merge(batch, inplace=True)

    def merge(self, other: "NormStats", inplace: bool = False) -> "NormStats":
        if other.dim != self.dim:
            raise FrontendError("cannot merge stats of different dimension")
        target = self if inplace else NormStats(self.mean.copy(), self.m2.copy(), self.count, self.std_floor)
        if other.count == 0:
            return target
        if target.count == 0:
            target.mean, target.m2, target.count = other.mean.copy(), other.m2.copy(), other.count
            return target
        n = target.count + other.count
        delta = other.mean - target.mean
        target.mean = target.mean + delta * (other.count / n)
        target.m2 = target.m2 + other.m2 + delta**2 * (target.count * other.count / n)
        target.count = n
        return target

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "m2": self.m2.tolist(),
            "std_floor": self.std_floor,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        mean = np.asarray(obj["mean"], dtype=np.float64)
        count = int(obj["count"])
        if "m2" in obj:
            m2 = np.asarray(obj["m2"], dtype=np.float64)
        else:
            m2 = np.asarray(obj["std"], dtype=np.float64) ** 2 * count
        return cls(mean, m2, count, float(obj.get("std_floor", 1e-5)))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "NormStats":
        path = Path(path)
        if not path.is_file():
            raise FrontendError(f"normalization stats not found: {path}")
        return cls.from_json(json.loads(path.read_text()))


def accumulate_norm_stats(features: Iterable[FeatureMatrix], dim: int = 128) -> NormStats:
    stats = NormStats.empty(dim)
    for fm in features:
        stats.update(fm)
    if stats.count == 0:
        raise FrontendError("no frames to accumulate")
    return stats


def normalize(features: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    if features.cols != stats.dim:
        raise FrontendError(f"feature dim {features.cols} != stats dim {stats.dim}")
    return FeatureMatrix((features.values - stats.mean) / stats.std, features.frame_rate_hz)


def stack_and_subsample(features: FeatureMatrix, config: FrontendConfig = FrontendConfig()) -> FeatureMatrix:
    """Stack each frame with its left context, then keep every ``subsample``-th frame.

    Row t of the output concatenates input frames (s-3, s-2, s-1, s) for
    s = t * subsample, oldest first, replicating frame 0 before the start.
    """
    x = features.values
    if x.shape[0] == 0:
        raise FrontendError("empty feature matrix")
    k = config.stack
    padded = np.concatenate([np.repeat(x[:1], k - 1, axis=0), x], axis=0)
    keep = np.arange(0, x.shape[0], config.subsample)
    stacked = np.concatenate([padded[keep + j] for j in range(k)], axis=1)
    return FeatureMatrix(stacked, features.frame_rate_hz / config.subsample)


def extract(
    audio: AudioBuffer,
    config: FrontendConfig = FrontendConfig(),
    stats: Optional[NormStats] = None,
) -> FeatureMatrix:
    """logmel -> optional global normalization -> stack/subsample."""
    feats = logmel(audio, config)
    if stats is not None:
        feats = normalize(feats, stats)
    return stack_and_subsample(feats, config)


def write_lmfb(path, features: FeatureMatrix) -> None:
    values = np.ascontiguousarray(features.values, dtype="<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_LMFB_HEADER.pack(LMFB_MAGIC, LMFB_VERSION, values.shape[0], values.shape[1]))
        f.write(values.tobytes())


def lmfb_bytes(features: FeatureMatrix) -> bytes:
    return np.ascontiguousarray(features.values, dtype="<f4").tobytes()


def read_lmfb(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_LMFB_HEADER.size)
        if len(header) != _LMFB_HEADER.size:
            raise FrontendError(f"{path}: truncated header")
        magic, version, rows, cols = _LMFB_HEADER.unpack(header)
        if magic != LMFB_MAGIC:
            raise FrontendError(f"{path}: bad magic {magic!r}")
        if version != LMFB_VERSION:
            raise FrontendError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != rows * cols:
        raise FrontendError(f"{path}: expected {rows * cols} floats, found {data.size}")
    return data.reshape(rows, cols)
