"""Windowed-sinc polyphase resampling between 8 kHz and 16 kHz."""

from __future__ import annotations

import functools
from fractions import Fraction

import numpy as np
from scipy import signal

from mdpipe.audio import SUPPORTED_RATES, AudioBuffer

STOPBAND_DB = 70.0
PASSBAND_EDGE = 0.45  # fraction of the lower rate, i.e. 0.9 of its Nyquist


@functools.lru_cache(maxsize=None)
def lowpass_taps(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc anti-aliasing filter at the intermediate rate ``up * fs_in``.

    The transition band runs from 0.45 to 0.5 of the lower of the two rates.
    """
    # normalized to the intermediate-rate Nyquist
    nyq_low = 1.0 / max(up, down)
    f_pass = 2 * PASSBAND_EDGE * nyq_low
    f_stop = nyq_low
    numtaps, beta = signal.kaiserord(STOPBAND_DB, f_stop - f_pass)
    numtaps |= 1  # odd length keeps the group delay an integer
    taps = signal.firwin(numtaps, 0.5 * (f_pass + f_stop), window=("kaiser", beta))
    taps.setflags(write=False)
    return taps


def resample(audio: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    """Resample to ``target_rate_hz``; same-rate input is returned unchanged.

    Output length is ceil(n * target / source); filter delay is compensated.
    """
    if target_rate_hz not in SUPPORTED_RATES:
        raise ValueError(f"unsupported target rate {target_rate_hz}; expected one of {SUPPORTED_RATES}")
    if audio.sample_rate_hz not in SUPPORTED_RATES:
        raise ValueError(f"unsupported source rate {audio.sample_rate_hz}; expected one of {SUPPORTED_RATES}")
    if target_rate_hz == audio.sample_rate_hz:
        return audio
    ratio = Fraction(target_rate_hz, audio.sample_rate_hz)
    up, down = ratio.numerator, ratio.denominator
    if len(audio) == 0:
        return AudioBuffer(np.zeros(0), target_rate_hz)
    out = signal.resample_poly(audio.samples, up, down, window=lowpass_taps(up, down))
    return AudioBuffer(np.clip(out, -1.0, 1.0), target_rate_hz)


def narrowband_roundtrip(audio: AudioBuffer) -> AudioBuffer:
    """16 kHz -> 8 kHz -> 16 kHz, trimmed back to the input length."""
    n = len(audio)
    back = resample(resample(audio, 8000), 16000)
    return AudioBuffer(back.samples[:n], 16000)


def simulate_bandwidth(audio: AudioBuffer, downsample_prob: float, rng: np.random.Generator) -> AudioBuffer:
    """With probability ``downsample_prob`` pass the utterance through an 8 kHz round trip.

    Exactly one uniform draw is consumed from ``rng`` per call.
    """
    if audio.sample_rate_hz != 16000:
        raise ValueError(f"bandwidth simulation expects 16 kHz input, got {audio.sample_rate_hz}")
    if not 0.0 <= downsample_prob <= 1.0:
        raise ValueError(f"downsample_prob must be in [0, 1], got {downsample_prob}")
    if rng.random() < downsample_prob:
        return narrowband_roundtrip(audio)
    return audio
