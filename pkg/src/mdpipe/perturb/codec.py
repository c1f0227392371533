"""Lossy codec round trips.

Seven training conditions exist: MP3 at 128/32/23 kbps, AAC at 128/64/23 kbps
and no codec. MP3/AAC run through an external transcoder when one is
configured via ``MDPIPE_TRANSCODER``; otherwise a hermetic fallback maps each
condition onto a G.711 mu-law or IMA ADPCM surrogate of similar bit rate.
"""

from __future__ import annotations

import enum
import logging
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import correlate

from mdpipe.audio import AudioBuffer, read_wav, to_pcm16, write_wav
from mdpipe.perturb.resample import resample

logger = logging.getLogger(__name__)

TRANSCODER_ENV = "MDPIPE_TRANSCODER"


class CodecError(RuntimeError):
    pass


class CodecCondition(enum.Enum):
    MP3_128K = ("mp3", 128)
    MP3_32K = ("mp3", 32)
    MP3_23K = ("mp3", 23)
    AAC_128K = ("aac", 128)
    AAC_64K = ("aac", 64)
    AAC_23K = ("aac", 23)
    NONE = (None, None)

    @property
    def codec(self) -> Optional[str]:
        return self.value[0]

    @property
    def bitrate_kbps(self) -> Optional[int]:
        return self.value[1]

    @property
    def label(self) -> str:
        return "NONE" if self is CodecCondition.NONE else f"{self.codec.upper()}@{self.bitrate_kbps}k"

    @classmethod
    def from_label(cls, label: str) -> "CodecCondition":
        for cond in cls:
            if cond.label == label or cond.name == label:
                return cond
        raise ValueError(f"unknown codec condition {label!r}")


ALL_CONDITIONS = tuple(CodecCondition)


def sample_codec_condition(rng: np.random.Generator) -> CodecCondition:
    """Uniform draw over the seven conditions (one integer draw from ``rng``)."""
    return ALL_CONDITIONS[int(rng.integers(0, len(ALL_CONDITIONS)))]


# --- G.711 mu-law ---------------------------------------------------------

_ULAW_BIAS = 0x84
_ULAW_CLIP = 32635
_ULAW_SEG_END = np.array([0xFF, 0x1FF, 0x3FF, 0x7FF, 0xFFF, 0x1FFF, 0x3FFF, 0x7FFF])


def ulaw_encode(pcm: np.ndarray) -> np.ndarray:
    """16-bit linear PCM to 8-bit G.711 mu-law codes."""
    pcm = np.asarray(pcm, dtype=np.int32)
    mask = np.where(pcm < 0, 0x7F, 0xFF)
    mag = np.minimum(np.abs(pcm), _ULAW_CLIP) + _ULAW_BIAS
    seg = np.searchsorted(_ULAW_SEG_END, mag)
    code = (seg << 4) | ((mag >> (seg + 3)) & 0xF)
    return (code ^ mask).astype(np.uint8)


def ulaw_decode(codes: np.ndarray) -> np.ndarray:
    u = ~np.asarray(codes, dtype=np.int32) & 0xFF
    t = (((u & 0x0F) << 3) + _ULAW_BIAS) << ((u & 0x70) >> 4)
    return np.where(u & 0x80, _ULAW_BIAS - t, t - _ULAW_BIAS).astype(np.int16)


# --- IMA ADPCM ------------------------------------------------------------

_IMA_INDEX = (-1, -1, -1, -1, 2, 4, 6, 8, -1, -1, -1, -1, 2, 4, 6, 8)
_IMA_STEP = (
    7, 8, 9, 10, 11, 12, 13, 14, 16, 17, 19, 21, 23, 25, 28, 31, 34, 37, 41, 45,
    50, 55, 60, 66, 73, 80, 88, 97, 107, 118, 130, 143, 157, 173, 190, 209, 230,
    253, 279, 307, 337, 371, 408, 449, 494, 544, 598, 658, 724, 796, 876, 963,
    1060, 1166, 1282, 1411, 1552, 1707, 1878, 2066, 2272, 2499, 2749, 3024, 3327,
    3660, 4026, 4428, 4871, 5358, 5894, 6484, 7132, 7845, 8630, 9493, 10442,
    11487, 12635, 13899, 15289, 16818, 18500, 20350, 22385, 24623, 27086, 29794,
    32767,
)


def _ima_step(code: int, predicted: int, index: int) -> tuple[int, int]:
    step = _IMA_STEP[index]
    diff = step >> 3
    if code & 4:
        diff += step
    if code & 2:
        diff += step >> 1
    if code & 1:
        diff += step >> 2
    predicted = predicted - diff if code & 8 else predicted + diff
    predicted = max(-32768, min(32767, predicted))
    index = max(0, min(88, index + _IMA_INDEX[code]))
    return predicted, index


def ima_adpcm_encode(pcm: np.ndarray) -> np.ndarray:
    """16-bit PCM to 4-bit IMA ADPCM codes (one per uint8), zero initial state."""
    predicted, index = 0, 0
    codes = np.empty(len(pcm), dtype=np.uint8)
    for i, sample in enumerate(np.asarray(pcm, dtype=np.int64).tolist()):
        step = _IMA_STEP[index]
        delta = sample - predicted
        code = 0
        if delta < 0:
            code = 8
            delta = -delta
        if delta >= step:
            code |= 4
            delta -= step
        if delta >= step >> 1:
            code |= 2
            delta -= step >> 1
        if delta >= step >> 2:
            code |= 1
        predicted, index = _ima_step(code, predicted, index)
        codes[i] = code
    return codes


def ima_adpcm_decode(codes: np.ndarray) -> np.ndarray:
    predicted, index = 0, 0
    out = np.empty(len(codes), dtype=np.int16)
    for i, code in enumerate(np.asarray(codes).tolist()):
        predicted, index = _ima_step(code, predicted, index)
        out[i] = predicted
    return out


# --- backends -------------------------------------------------------------


@dataclass(frozen=True)
class CodecOutput:
    samples: np.ndarray
    delay: Optional[int]  # leading samples to drop; None if unknown
    label: str


class FallbackCodecBackend:
    """Hermetic surrogates with a bit rate at or just above the nominal one.

    128 kbps -> mu-law at 16 kHz, 64 kbps -> IMA ADPCM at 16 kHz,
    32/23 kbps -> IMA ADPCM at 8 kHz (32 kbps).
    """

    name = "fallback"

    @staticmethod
    def surrogate(condition: CodecCondition) -> str:
        rate = condition.bitrate_kbps
        if rate >= 128:
            return "mulaw16k"
        if rate >= 64:
            return "ima_adpcm16k"
        return "ima_adpcm8k"

    def roundtrip(self, audio: AudioBuffer, condition: CodecCondition) -> CodecOutput:
        kind = self.surrogate(condition)
        if kind == "mulaw16k":
            out = ulaw_decode(ulaw_encode(to_pcm16(audio.samples)))
            return CodecOutput(out / 32768.0, 0, kind)
        if kind == "ima_adpcm16k":
            out = ima_adpcm_decode(ima_adpcm_encode(to_pcm16(audio.samples)))
            return CodecOutput(out / 32768.0, 0, kind)
        narrow = resample(audio, 8000)
        dec = ima_adpcm_decode(ima_adpcm_encode(to_pcm16(narrow.samples))) / 32768.0
        back = resample(AudioBuffer(np.clip(dec, -1.0, 1.0), 8000), 16000)
        return CodecOutput(back.samples, 0, kind)


_ENCODERS = {"mp3": ("libmp3lame", "mp3"), "aac": ("aac", "m4a")}

DEFAULT_ENCODE_TEMPLATE = (
    "{binary} -nostdin -hide_banner -loglevel error -y -i {input} "
    "-c:a {codec} -b:a {bitrate}k {output}"
)
DEFAULT_DECODE_TEMPLATE = (
    "{binary} -nostdin -hide_banner -loglevel error -y -i {input} "
    "-ar 16000 -ac 1 -c:a pcm_s16le {output}"
)


class TranscoderBackend:
    """Round trip through an external transcoder (ffmpeg-compatible by default).

    Each call spawns an encode and a decode subprocess exchanging PCM16 WAV;
    at most ``max_processes`` calls run at once across threads.
    """

    name = "transcoder"

    def __init__(
        self,
        binary: str,
        encode_template: str = DEFAULT_ENCODE_TEMPLATE,
        decode_template: str = DEFAULT_DECODE_TEMPLATE,
        max_processes: int = 4,
        timeout_s: float = 120.0,
    ):
        self.binary = binary
        self.encode_template = encode_template
        self.decode_template = decode_template
        self.timeout_s = timeout_s
        self._slots = threading.BoundedSemaphore(max_processes)

    def _run(self, template: str, **fields) -> None:
        argv = [tok.format(binary=self.binary, **fields) for tok in shlex.split(template)]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=self.timeout_s)
        except FileNotFoundError:
            raise CodecError(f"transcoder not found: {self.binary}") from None
        except subprocess.TimeoutExpired:
            raise CodecError(f"transcoder timed out after {self.timeout_s}s") from None
        if proc.returncode != 0:
            stderr = proc.stderr.decode("utf-8", "replace").strip()
            raise CodecError(f"transcoder exited with status {proc.returncode}: {stderr[-500:]}")

    def roundtrip(self, audio: AudioBuffer, condition: CodecCondition) -> CodecOutput:
        codec_name, ext = _ENCODERS[condition.codec]
        with self._slots, tempfile.TemporaryDirectory(prefix="mdpipe-codec-") as tmp:
            src = Path(tmp) / "in.wav"
            enc = Path(tmp) / f"enc.{ext}"
            dec = Path(tmp) / "dec.wav"
            write_wav(src, audio)
            fields = dict(codec=codec_name, bitrate=condition.bitrate_kbps)
            self._run(self.encode_template, input=str(src), output=str(enc), **fields)
            self._run(self.decode_template, input=str(enc), output=str(dec), **fields)
            if not dec.is_file():
                raise CodecError("transcoder produced no decoded output")
            decoded = read_wav(dec)
        if len(decoded) == 0:
            raise CodecError("decoded stream is empty")
        if decoded.sample_rate_hz != audio.sample_rate_hz:
            decoded = resample(decoded, audio.sample_rate_hz)
        return CodecOutput(decoded.samples, None, f"{condition.codec}@{condition.bitrate_kbps}k")


def default_backend():
    binary = os.environ.get(TRANSCODER_ENV)
    if binary:
        return TranscoderBackend(binary)
    return FallbackCodecBackend()


def estimate_delay(reference: np.ndarray, decoded: np.ndarray, max_lag: int = 4096) -> int:
    """Lag in [0, max_lag] maximizing the cross-correlation of decoded against reference."""
    max_lag = min(max_lag, max(len(decoded) - 1, 0))
    if len(reference) == 0 or len(decoded) == 0:
        return 0
    xc = correlate(decoded, reference, mode="full", method="fft")
    zero = len(reference) - 1
    window = xc[zero : zero + max_lag + 1]
    return int(np.argmax(window))


def align_to_length(decoded: np.ndarray, delay: int, n: int) -> np.ndarray:
    out = np.asarray(decoded, dtype=np.float64)[delay : delay + n]
    if out.shape[0] < n:
        out = np.concatenate([out, np.zeros(n - out.shape[0])])
    return out


def apply_codec(audio: AudioBuffer, condition: CodecCondition, backend=None) -> AudioBuffer:
    """Encode and decode ``audio``; output has exactly the input's sample count."""
    if audio.sample_rate_hz != 16000:
        raise ValueError(f"codec simulation expects 16 kHz input, got {audio.sample_rate_hz}")
    if condition is CodecCondition.NONE:
        return audio
    backend = backend if backend is not None else default_backend()
    result = backend.roundtrip(audio, condition)
    if len(result.samples) == 0:
        raise CodecError("decoded stream is empty")
    delay = result.delay
    if delay is None:
        delay = estimate_delay(audio.samples, result.samples)
    out = align_to_length(result.samples, delay, len(audio))
    return AudioBuffer(np.clip(out, -1.0, 1.0), audio.sample_rate_hz)
