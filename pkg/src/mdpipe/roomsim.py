"""Shoebox room simulation: noise-config pools, image-source RIRs and SNR mixing."""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from mdpipe.audio import AudioBuffer

SPEED_OF_SOUND = 343.0

SNR_RANGE_DB = (0.0, 30.0)
RT60_RANGE_S = (0.0, 0.9)
DISTANCE_RANGE_M = (1.0, 10.0)
MAX_NOISE_SOURCES = 4

# room size ranges in meters (length, width, height)
ROOM_RANGES = ((3.0, 12.0), (3.0, 12.0), (2.5, 5.0))
WALL_MARGIN_M = 0.2
MIN_NOISE_MIC_DISTANCE_M = 0.5
MIN_SOURCE_DISTANCE_M = 0.01


class RoomSimError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    room_dims: tuple
    rt60_s: float
    mic_pos: tuple
    speech_pos: tuple
    noise_positions: tuple
    snr_db: float

    def to_json(self) -> dict:
        return {
            "room_dims": list(self.room_dims),
            "rt60_s": self.rt60_s,
            "mic_pos": list(self.mic_pos),
            "speech_pos": list(self.speech_pos),
            "noise_positions": [list(p) for p in self.noise_positions],
            "snr_db": self.snr_db,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseConfig":
        return cls(
            room_dims=tuple(float(v) for v in obj["room_dims"]),
            rt60_s=float(obj["rt60_s"]),
            mic_pos=tuple(float(v) for v in obj["mic_pos"]),
            speech_pos=tuple(float(v) for v in obj["speech_pos"]),
            noise_positions=tuple(tuple(float(v) for v in p) for p in obj["noise_positions"]),
            snr_db=float(obj["snr_db"]),
        )

    @property
    def speech_distance(self) -> float:
        return _dist(self.speech_pos, self.mic_pos)


@dataclass(frozen=True)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate_hz: int


def _dist(a, b) -> float:
    return float(np.linalg.norm(np.subtract(a, b)))


def _inside(pos, dims) -> bool:
    return all(0.0 < p < d for p, d in zip(pos, dims))


def config_violations(cfg: NoiseConfig) -> list[str]:
    """Return the invariants ``cfg`` breaks (empty when valid)."""
    problems = []
    if len(cfg.room_dims) != 3 or any(d <= 0 for d in cfg.room_dims):
        problems.append("room_dims must be 3 positive reals")
    if not RT60_RANGE_S[0] <= cfg.rt60_s <= RT60_RANGE_S[1]:
        problems.append(f"rt60_s={cfg.rt60_s} outside {RT60_RANGE_S}")
    if not SNR_RANGE_DB[0] <= cfg.snr_db <= SNR_RANGE_DB[1]:
        problems.append(f"snr_db={cfg.snr_db} outside {SNR_RANGE_DB}")
    if not 0 <= len(cfg.noise_positions) <= MAX_NOISE_SOURCES:
        problems.append(f"{len(cfg.noise_positions)} noise sources (max {MAX_NOISE_SOURCES})")
    d = cfg.speech_distance
    if not DISTANCE_RANGE_M[0] <= d <= DISTANCE_RANGE_M[1]:
        problems.append(f"speech-mic distance {d:.3f} m outside {DISTANCE_RANGE_M}")
    for name, pos in [("mic_pos", cfg.mic_pos), ("speech_pos", cfg.speech_pos)] + [
        (f"noise_positions[{i}]", p) for i, p in enumerate(cfg.noise_positions)
    ]:
        if not _inside(pos, cfg.room_dims):
            problems.append(f"{name}={pos} not strictly inside room {cfg.room_dims}")
    return problems


def validate_config(cfg: NoiseConfig) -> NoiseConfig:
    problems = config_violations(cfg)
    if problems:
        raise RoomSimError("; ".join(problems))
    return cfg


_BATCH = 4096
_DIRECTIONS = 16


def _candidate_batch(rng: np.random.Generator) -> list[NoiseConfig]:
    lo = np.array([r[0] for r in ROOM_RANGES])
    hi = np.array([r[1] for r in ROOM_RANGES])
    dims = rng.uniform(lo, hi, size=(_BATCH, 3))
    inner = dims - WALL_MARGIN_M
    mic = rng.uniform(WALL_MARGIN_M, inner)
    distance = rng.uniform(*DISTANCE_RANGE_M, size=_BATCH)
    # several directions per candidate keep long distances from being rejected outright
    direction = rng.normal(size=(_BATCH, _DIRECTIONS, 3))
    direction /= np.linalg.norm(direction, axis=2, keepdims=True)
    cand = mic[:, None, :] + distance[:, None, None] * direction
    fits = np.all((cand > WALL_MARGIN_M) & (cand < inner[:, None, :]), axis=2)
    speech = cand[np.arange(_BATCH), np.argmax(fits, axis=1)]
    n_noise = rng.integers(0, MAX_NOISE_SOURCES + 1, size=_BATCH)
    noise = rng.uniform(WALL_MARGIN_M, inner[:, None, :], size=(_BATCH, MAX_NOISE_SOURCES, 3))
    rt60 = rng.uniform(*RT60_RANGE_S, size=_BATCH)
    snr = rng.uniform(*SNR_RANGE_DB, size=_BATCH)

    speech_ok = np.all((speech > WALL_MARGIN_M) & (speech < inner), axis=1)
    used = np.arange(MAX_NOISE_SOURCES)[None, :] < n_noise[:, None]
    far = np.linalg.norm(noise - mic[:, None, :], axis=2) >= MIN_NOISE_MIC_DISTANCE_M
    noise_ok = np.all(far | ~used, axis=1)

    out = []
    for i in np.flatnonzero(speech_ok & noise_ok):
        out.append(
            NoiseConfig(
                room_dims=tuple(dims[i].tolist()),
                rt60_s=float(rt60[i]),
                mic_pos=tuple(mic[i].tolist()),
                speech_pos=tuple(speech[i].tolist()),
                noise_positions=tuple(tuple(p) for p in noise[i, : n_noise[i]].tolist()),
                snr_db=float(snr[i]),
            )
        )
    return out


def generate_config_pool(seed: int, count: int) -> list[NoiseConfig]:
    """Draw ``count`` room/mixing conditions; identical seeds give identical pools.

    Room size, RT60, SNR, speech distance and the number of noise sources
    (0..4) are drawn uniformly; candidates whose speech source falls outside
    the room are rejected. Draws happen in fixed-size batches, so a smaller
    pool is a prefix of a larger one with the same seed.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    pool: list[NoiseConfig] = []
    while len(pool) < count:
        pool.extend(_candidate_batch(rng))
    return pool[:count]


def save_config_pool(path, configs: Iterable[NoiseConfig]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for cfg in configs:
            f.write(json.dumps(cfg.to_json()) + "\n")


def load_config_pool(path) -> list[NoiseConfig]:
    configs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                cfg = NoiseConfig.from_json(json.loads(line))
                validate_config(cfg)
            except (KeyError, TypeError, ValueError) as e:
                raise RoomSimError(f"{path}:{lineno}: invalid noise config ({e})") from None
            configs.append(cfg)
    return configs


def _axis_images(length: float, src: float, mic: float, max_dist: float):
    """Per-axis image offsets and reflection counts within ``max_dist``.

    Image coordinate for index n and parity q is 2*n*L + (1 - 2q)*src, hit
    |2n - q| times by a wall.
    """
    n_max = int(math.ceil(max_dist / (2.0 * length))) + 1
    n = np.arange(-n_max, n_max + 1)
    offs = []
    refl = []
    for q in (0, 1):
        offs.append(2.0 * n * length + (1 - 2 * q) * src - mic)
        refl.append(np.abs(2 * n - q))
    offs = np.concatenate(offs)
    refl = np.concatenate(refl)
    keep = np.abs(offs) <= max_dist
    return offs[keep], refl[keep]


def _image_table(room_dims, mic_pos, source_pos, length: int, sample_rate_hz: int) -> np.ndarray:
    """Summed 1/r image amplitudes indexed by (tap, reflection count).

    The RIR for reflection coefficient beta is ``table @ beta**arange(K)``.
    """
    max_dist = (length - 0.5) / sample_rate_hz * SPEED_OF_SOUND
    (dx, rx), (dy, ry), (dz, rz) = [
        _axis_images(room_dims[k], source_pos[k], mic_pos[k], max_dist) for k in range(3)
    ]
    n_refl = int(rx.max() + ry.max() + rz.max()) + 1
    dyz2 = (dy[:, None] ** 2 + dz[None, :] ** 2).ravel()
    ryz = (ry[:, None] + rz[None, :]).ravel()
    flats, weights = [], []
    # loop over the x axis to bound memory; accumulation order is fixed
    for x_off, x_refl in zip(dx, rx):
        d2 = x_off * x_off + dyz2
        mask = d2 <= max_dist * max_dist
        if not mask.any():
            continue
        d = np.sqrt(d2[mask])
        idx = np.rint(d / SPEED_OF_SOUND * sample_rate_hz).astype(np.int64)
        ok = idx < length
        flats.append(idx[ok] * n_refl + (x_refl + ryz[mask][ok]))
        weights.append(1.0 / d[ok])
    table = np.bincount(np.concatenate(flats), weights=np.concatenate(weights), minlength=length * n_refl)
    return table.reshape(length, n_refl)


def _taps_for(table: np.ndarray, beta: float) -> np.ndarray:
    return table @ (beta ** np.arange(table.shape[1]))


def _decay_t60(taps: np.ndarray, sample_rate_hz: int) -> float:
    try:
        return schroeder_t60(ImpulseResponse(taps, sample_rate_hz), -5.0, -35.0)
    except ValueError:
        return 0.0


def _calibrate_beta(table: np.ndarray, rt60_s: float, sample_rate_hz: int, rel_tol: float = 1e-4) -> float:
    """Solve for the wall reflection coefficient whose simulated decay hits ``rt60_s``.

    Image-source decay in a shoebox is slower than Eyring/Sabine predict, so
    the absorption a = -ln(beta) is found numerically. T60 falls roughly as
    1/a, which makes a <- a * T60(a) / target converge in a few steps; a
    bracket keeps it safe where that approximation breaks down.
    """
    lo, hi = 1e-9, 50.0  # bracket on a: T60(lo) >= target >= T60(hi)
    a = 1.0
    best_a, best_err = a, math.inf
    for _ in range(60):
        t60 = _decay_t60(_taps_for(table, math.exp(-a)), sample_rate_hz)
        err = abs(t60 - rt60_s)
        if err < best_err:
            best_a, best_err = a, err
        if err <= rel_tol * rt60_s:
            break
        # short targets in large rooms can be unreachable; keep the closest decay
        if t60 > rt60_s:
            lo = a
        else:
            hi = a
        step = a * t60 / rt60_s if t60 > 0 else hi
        a = step if lo < step < hi else 0.5 * (lo + hi)
    return math.exp(-best_a)


@functools.lru_cache(maxsize=512)
def _rir_cached(room_dims, rt60_s, mic_pos, source_pos, sample_rate_hz):
    distance = _dist(source_pos, mic_pos)
    direct_index = int(round(distance / SPEED_OF_SOUND * sample_rate_hz))
    if rt60_s <= 0:
        taps = np.zeros(direct_index + 1)
        taps[direct_index] = 1.0 / distance
        return taps
    length = int(math.ceil(rt60_s * sample_rate_hz)) + direct_index + 1
    table = _image_table(room_dims, mic_pos, source_pos, length, sample_rate_hz)
    beta = _calibrate_beta(table, rt60_s, sample_rate_hz)
    return _taps_for(table, beta)


def generate_rir(config: NoiseConfig, source_pos, sample_rate_hz: int) -> ImpulseResponse:
    """Image-source RIR from ``source_pos`` to the config's microphone.

    Taps sit at the nearest sample of each image delay with 1/r amplitude and
    beta**reflections wall loss, where the uniform wall reflection coefficient
    beta is solved so the backward-integrated decay reaches ``rt60_s``. The
    response spans at least rt60 seconds; with rt60 = 0 only the direct path
    is present.
    """
    if sample_rate_hz not in (8000, 16000):
        raise RoomSimError(f"unsupported sample rate {sample_rate_hz}")
    source_pos = tuple(float(v) for v in source_pos)
    if not _inside(source_pos, config.room_dims):
        raise RoomSimError(f"source {source_pos} not inside room {config.room_dims}")
    if _dist(source_pos, config.mic_pos) < MIN_SOURCE_DISTANCE_M:
        raise RoomSimError("source coincides with microphone (distance < 1 cm)")
    taps = _rir_cached(
        tuple(config.room_dims), float(config.rt60_s), tuple(config.mic_pos), source_pos, sample_rate_hz
    )
    return ImpulseResponse(taps.copy(), sample_rate_hz)


def schroeder_t60(rir: ImpulseResponse, start_db: float = -5.0, end_db: float = -25.0) -> float:
    """T60 from a linear fit to the backward-integrated energy decay curve."""
    energy = np.asarray(rir.taps, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise ValueError("impulse response has no energy")
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / edc[0])
    sel = np.nonzero((edc_db <= start_db) & (edc_db >= end_db))[0]
    if sel.size < 2:
        raise ValueError("decay range not covered by impulse response")
    t = sel / rir.sample_rate_hz
    slope, _ = np.polyfit(t, edc_db[sel], 1)
    return -60.0 / slope


def measure_snr(signal, noise) -> float:
    """10*log10 of the signal-to-noise power ratio."""
    s = signal.samples if isinstance(signal, AudioBuffer) else np.asarray(signal, dtype=np.float64)
    n = noise.samples if isinstance(noise, AudioBuffer) else np.asarray(noise, dtype=np.float64)
    if s.shape != n.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {n.shape}")
    pn = float(np.sum(n * n))
    if pn <= 0:
        raise ValueError("noise has zero power")
    return 10.0 * math.log10(float(np.sum(s * s)) / pn)


def _fit_length(x: np.ndarray, n: int, offset: int) -> np.ndarray:
    """Loop or crop ``x`` to ``n`` samples starting at ``offset``."""
    idx = (offset + np.arange(n)) % x.shape[0]
    return x[idx]


def _reverberate(x: np.ndarray, rir: ImpulseResponse) -> np.ndarray:
    return fftconvolve(x, rir.taps)[: x.shape[0]]


def mix_components(
    speech: AudioBuffer,
    noises: Sequence[AudioBuffer],
    config: NoiseConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Reverberant speech and the gain-scaled noise sum, before any peak scaling.

    Each reverberant noise is brought to unit power before summing so that the
    sources contribute equally; one gain then sets the mixture to the config's SNR.
    """
    if len(noises) != len(config.noise_positions):
        raise RoomSimError(
            f"{len(noises)} noise buffers for {len(config.noise_positions)} noise sources"
        )
    rate = speech.sample_rate_hz
    if any(nb.sample_rate_hz != rate for nb in noises):
        raise RoomSimError("all buffers must share the speech sample rate")
    n = len(speech)
    rev_speech = _reverberate(speech.samples, generate_rir(config, config.speech_pos, rate))
    p_speech = float(np.mean(rev_speech**2)) if n else 0.0
    if p_speech <= 0:
        raise RoomSimError("speech has zero power; SNR is undefined")
    noise_sum = np.zeros(n)
    if not noises:
        return rev_speech, noise_sum
    for nb, pos in zip(noises, config.noise_positions):
        if len(nb) == 0:
            raise RoomSimError("empty noise buffer")
        looped = _fit_length(nb.samples, n, int(rng.integers(0, len(nb))))
        rev = _reverberate(looped, generate_rir(config, pos, rate))
        p = float(np.mean(rev**2))
        if p <= 0:
            raise RoomSimError("noise source has zero power")
        noise_sum += rev / math.sqrt(p)
    p_noise = float(np.mean(noise_sum**2))
    if p_noise <= 0:
        raise RoomSimError("noise sources cancel to zero power")
    gain = math.sqrt(p_speech / (p_noise * 10.0 ** (config.snr_db / 10.0)))
    return rev_speech, gain * noise_sum


def mix(
    speech: AudioBuffer,
    noises: Sequence[AudioBuffer],
    config: NoiseConfig,
    rng: np.random.Generator,
) -> AudioBuffer:
    """Reverberate speech and noises in the configured room and mix at the target SNR.

    If the mixture peaks above full scale it is scaled down as a whole, which
    keeps the SNR intact.
    """
    rev_speech, noise = mix_components(speech, noises, config, rng)
    out = rev_speech + noise
    peak = float(np.max(np.abs(out))) if out.size else 0.0
    if peak > 1.0:
        out = out / peak
    return AudioBuffer(out, speech.sample_rate_hz)
