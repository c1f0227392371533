"""Per-utterance perturbation sampling and the asynchronous featurization pipeline.

Every utterance draws its perturbations from a generator seeded by
(master seed, utterance id, epoch), so the content of each produced item is
independent of worker count and scheduling; only delivery order varies.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from mdpipe.audio import AudioBuffer, read_wav
from mdpipe.frontend import FeatureMatrix, FrontendConfig, NormStats, extract, write_lmfb
from mdpipe.manifest import PooledDataset, UtteranceRecord, load_manifest
from mdpipe.perturb.codec import ALL_CONDITIONS, CodecCondition, apply_codec, sample_codec_condition
from mdpipe.perturb.resample import narrowband_roundtrip, resample
from mdpipe.queue import FeatureQueue, QueueClosed
from mdpipe.roomsim import NoiseConfig, load_config_pool, mix

logger = logging.getLogger(__name__)

STAGES = ("load", "noise", "bandwidth", "codec", "features", "enqueue")


class PolicyError(ValueError):
    pass


class AudioLoadError(OSError):
    pass


@dataclass(frozen=True)
class DomainPolicy:
    noise_prob: float = 0.0
    bandwidth_prob: float = 0.0
    codec_prob: float = 0.0

    def __post_init__(self):
        for name in ("noise_prob", "bandwidth_prob", "codec_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise PolicyError(f"{name}={p} outside [0, 1]")


@dataclass(frozen=True)
class PerturbationPolicy:
    domains: Mapping[str, DomainPolicy]
    master_seed: int = 0
    config_pool_path: Optional[str] = None
    noise_manifest_path: Optional[str] = None
    default: Optional[DomainPolicy] = None
    # 8 kHz-native inputs skip codec simulation unless this is set
    codec_on_narrowband: bool = False

    def __post_init__(self):
        if self.master_seed < 0:
            raise PolicyError(f"master_seed must be non-negative, got {self.master_seed}")

    def for_domain(self, domain: str) -> DomainPolicy:
        if domain in self.domains:
            return self.domains[domain]
        if self.default is not None:
            return self.default
        raise PolicyError(f"domain {domain!r} not covered by policy")

    def check_dataset(self, dataset: PooledDataset) -> None:
        missing = sorted(set(self.domains) - set(dataset.domains))
        if missing:
            raise PolicyError(f"policy references domains absent from the dataset: {missing}")
        for dom in dataset.domains:
            self.for_domain(dom)

    @classmethod
    def uniform(cls, domains, noise_prob=0.0, bandwidth_prob=0.0, codec_prob=0.0, **kw) -> "PerturbationPolicy":
        dp = DomainPolicy(noise_prob, bandwidth_prob, codec_prob)
        return cls({d: dp for d in domains}, **kw)

    def to_json(self) -> dict:
        out = {
            "master_seed": self.master_seed,
            "config_pool_path": self.config_pool_path,
            "noise_manifest_path": self.noise_manifest_path,
            "codec_on_narrowband": self.codec_on_narrowband,
            "domains": {d: vars(p) for d, p in self.domains.items()},
        }
        if self.default is not None:
            out["default"] = vars(self.default)
        return out

    @classmethod
    def from_json(cls, obj: dict, base_dir=None) -> "PerturbationPolicy":
        def _path(key):
            p = obj.get(key)
            if p is None or base_dir is None:
                return p
            return str(Path(base_dir) / p)

        try:
            domains = {str(d): DomainPolicy(**rec) for d, rec in obj.get("domains", {}).items()}
            default = DomainPolicy(**obj["default"]) if obj.get("default") is not None else None
        except TypeError as e:
            raise PolicyError(f"bad domain policy record: {e}") from None
        return cls(
            domains=domains,
            master_seed=int(obj.get("master_seed", 0)),
            config_pool_path=_path("config_pool_path"),
            noise_manifest_path=_path("noise_manifest_path"),
            default=default,
            codec_on_narrowband=bool(obj.get("codec_on_narrowband", False)),
        )


def load_policy(path) -> PerturbationPolicy:
    path = Path(path)
    if not path.is_file():
        raise PolicyError(f"policy file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise PolicyError(f"{path}: malformed JSON ({e.msg})") from None
    return PerturbationPolicy.from_json(obj, base_dir=path.parent)


@dataclass(frozen=True)
class PerturbationTrace:
    utterance_id: str
    noise_config_index: Optional[int] = None
    noise_ids: tuple = ()
    noise_seed: Optional[int] = None
    bandwidth: bool = False
    codec: CodecCondition = CodecCondition.NONE

    @property
    def is_identity(self) -> bool:
        return self.noise_config_index is None and not self.bandwidth and self.codec is CodecCondition.NONE

    def to_json(self) -> dict:
        return {
            "id": self.utterance_id,
            "noise_config_index": self.noise_config_index,
            "noise_ids": list(self.noise_ids),
            "noise_seed": self.noise_seed,
            "bandwidth": self.bandwidth,
            "codec": self.codec.label,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PerturbationTrace":
        return cls(
            utterance_id=str(obj["id"]),
            noise_config_index=obj.get("noise_config_index"),
            noise_ids=tuple(obj.get("noise_ids", ())),
            noise_seed=obj.get("noise_seed"),
            bandwidth=bool(obj.get("bandwidth", False)),
            codec=CodecCondition.from_label(obj.get("codec", "NONE")),
        )


@dataclass
class PerturbationPools:
    """Loaded noise-config pool and noise corpus (all noise audio at 16 kHz)."""

    configs: Sequence[NoiseConfig] = ()
    noises: Mapping[str, AudioBuffer] = field(default_factory=dict)

    @property
    def noise_ids(self) -> list:
        return list(self.noises)

    @classmethod
    def from_policy(cls, policy: PerturbationPolicy) -> "PerturbationPools":
        configs = load_config_pool(policy.config_pool_path) if policy.config_pool_path else []
        noises = {}
        if policy.noise_manifest_path:
            for rec in load_manifest(policy.noise_manifest_path):
                audio = read_wav(rec.audio_path)
                noises[rec.id] = resample(audio, 16000)
        return cls(configs, noises)


def utterance_rng(master_seed: int, utterance_id: str, epoch: int) -> np.random.Generator:
    """Generator keyed on (seed, id, epoch), independent of processing order."""
    digest = hashlib.sha256(utterance_id.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([master_seed & 0xFFFFFFFF, master_seed >> 32, epoch, *words]))


def sample_perturbation(
    record: UtteranceRecord,
    policy: PerturbationPolicy,
    rng: np.random.Generator,
    pools: Optional[PerturbationPools] = None,
) -> PerturbationTrace:
    """Decide independently, with the domain's probabilities, which stages apply.

    Draw order is fixed: noise, bandwidth, codec. Bandwidth simulation never
    applies to 8 kHz-native records, and neither does the codec unless the
    policy enables it for narrowband input.
    """
    dp = policy.for_domain(record.domain)
    narrow = record.sample_rate_hz == 8000
    trace = dict(utterance_id=record.id)
    if rng.random() < dp.noise_prob:
        if pools is None or not pools.configs:
            raise PolicyError("noise requested but no noise-config pool is loaded")
        idx = int(rng.integers(0, len(pools.configs)))
        n_src = len(pools.configs[idx].noise_positions)
        ids = pools.noise_ids
        if n_src and not ids:
            raise PolicyError("noise config has sources but the noise corpus is empty")
        trace["noise_config_index"] = idx
        trace["noise_ids"] = tuple(ids[int(i)] for i in rng.integers(0, max(len(ids), 1), size=n_src))
        trace["noise_seed"] = int(rng.integers(0, 2**63 - 1))
    if rng.random() < dp.bandwidth_prob and not narrow:
        trace["bandwidth"] = True
    if rng.random() < dp.codec_prob:
        cond = sample_codec_condition(rng)
        if not narrow or policy.codec_on_narrowband:
            trace["codec"] = cond
    return PerturbationTrace(**trace)


def apply_trace(
    audio: AudioBuffer,
    trace: PerturbationTrace,
    pools: Optional[PerturbationPools] = None,
    codec_backend=None,
    timings: Optional[dict] = None,
) -> AudioBuffer:
    """Apply noise, then the 8 kHz round trip, then the codec. Output is 16 kHz."""
    clock = time.perf_counter
    out = resample(audio, 16000)
    t0 = clock()
    if trace.noise_config_index is not None:
        if pools is None:
            raise PolicyError("trace needs a noise-config pool")
        try:
            cfg = pools.configs[trace.noise_config_index]
            noises = [pools.noises[nid] for nid in trace.noise_ids]
        except (IndexError, KeyError) as e:
            raise PolicyError(f"trace for {trace.utterance_id!r} references missing pool entry {e}") from None
        out = mix(out, noises, cfg, np.random.default_rng(trace.noise_seed))
    t1 = clock()
    if trace.bandwidth:
        out = narrowband_roundtrip(out)
    t2 = clock()
    if trace.codec is not CodecCondition.NONE:
        out = apply_codec(out, trace.codec, codec_backend)
    t3 = clock()
    if timings is not None:
        timings.update(noise=t1 - t0, bandwidth=t2 - t1, codec=t3 - t2)
    return out


def condition_space_size(policy, pool_size: int, domain: Optional[str] = None) -> int:
    """Number of distinct traces one utterance can receive.

    Noise contributes pool_size + 1 when optional (0 < p < 1), pool_size when
    always on; bandwidth doubles the space when optional; a codec stage
    contributes all 7 conditions (NONE included) whenever it can fire.
    """
    dp = policy.for_domain(domain) if isinstance(policy, PerturbationPolicy) else policy
    size = 1
    if dp.noise_prob >= 1.0:
        size *= pool_size
    elif dp.noise_prob > 0.0:
        size *= pool_size + 1
    if 0.0 < dp.bandwidth_prob < 1.0:
        size *= 2
    if dp.codec_prob > 0.0:
        size *= len(ALL_CONDITIONS)
    return size


def epoch_order(n: int, master_seed: int, epoch: int, iid: bool = False) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([master_seed & 0xFFFFFFFF, master_seed >> 32, epoch, 0x5EED]))
    if iid:
        return rng.integers(0, n, size=n)
    return rng.permutation(n)


@dataclass(frozen=True)
class FeatureItem:
    utterance_id: str
    epoch: int
    features: FeatureMatrix
    trace: PerturbationTrace


def process_utterance(
    record: UtteranceRecord,
    epoch: int,
    policy: PerturbationPolicy,
    pools: PerturbationPools,
    frontend: FrontendConfig,
    stats: Optional[NormStats] = None,
    codec_backend=None,
    load_audio: Callable = read_wav,
    timings: Optional[dict] = None,
) -> FeatureItem:
    timings = {} if timings is None else timings
    t0 = time.perf_counter()
    try:
        audio = load_audio(record.audio_path)
    except Exception as e:
        raise AudioLoadError(f"{record.audio_path}: {e}") from e
    timings["load"] = time.perf_counter() - t0
    trace = sample_perturbation(record, policy, utterance_rng(policy.master_seed, record.id, epoch), pools)
    perturbed = apply_trace(audio, trace, pools, codec_backend, timings)
    t1 = time.perf_counter()
    feats = extract(perturbed, frontend, stats)
    timings["features"] = time.perf_counter() - t1
    return FeatureItem(record.id, epoch, feats, trace)


_HIST_EDGES_MS = np.concatenate([[0.0], np.logspace(-2, 5, 29)])


def _latency_summary(samples_s: list) -> dict:
    ms = np.asarray(samples_s, dtype=np.float64) * 1000.0
    if ms.size == 0:
        return {"count": 0}
    counts, _ = np.histogram(ms, bins=np.append(_HIST_EDGES_MS, np.inf))
    return {
        "count": int(ms.size),
        "mean_ms": float(ms.mean()),
        "p50_ms": float(np.percentile(ms, 50)),
        "p95_ms": float(np.percentile(ms, 95)),
        "p99_ms": float(np.percentile(ms, 99)),
        "histogram": {
            "edges_ms": [float(e) for e in _HIST_EDGES_MS],
            "counts": [int(c) for c in counts],
        },
    }


@dataclass
class RunReport:
    epochs: int
    workers: int
    capacity: int
    produced: int = 0
    consumed: int = 0
    skipped: int = 0
    skipped_ids: list = field(default_factory=list)
    dropped: int = 0
    frames: int = 0
    wall_s: float = 0.0
    queue_full_fraction: float = 0.0
    max_queue_occupancy: int = 0
    stage_latency: dict = field(default_factory=dict)

    @property
    def utterances_per_s(self) -> float:
        return self.consumed / self.wall_s if self.wall_s > 0 else 0.0

    @property
    def frames_per_s(self) -> float:
        return self.frames / self.wall_s if self.wall_s > 0 else 0.0

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "workers": self.workers,
            "capacity": self.capacity,
            "produced": self.produced,
            "consumed": self.consumed,
            "skipped": self.skipped,
            "skipped_ids": self.skipped_ids,
            "dropped": self.dropped,
            "frames": self.frames,
            "wall_s": self.wall_s,
            "throughput": {"utterances_per_s": self.utterances_per_s, "frames_per_s": self.frames_per_s},
            "queue_full_fraction": self.queue_full_fraction,
            "max_queue_occupancy": self.max_queue_occupancy,
            "stage_latency": self.stage_latency,
        }


def run_pipeline(
    dataset: PooledDataset,
    policy: PerturbationPolicy,
    frontend: FrontendConfig = FrontendConfig(),
    workers: int = 1,
    queue: Optional[FeatureQueue] = None,
    epochs: int = 1,
    consumer: Optional[Callable[[FeatureItem], None]] = None,
    stats: Optional[NormStats] = None,
    pools: Optional[PerturbationPools] = None,
    codec_backend=None,
    iid: bool = False,
    load_audio: Callable = read_wav,
) -> RunReport:
    """Featurize ``epochs`` passes over the dataset with ``workers`` producer threads.

    Producers block when the queue is full; ``consumer`` runs on the calling
    thread and receives every item. Unreadable audio is skipped and counted.
    If the consumer raises, buffered items are dropped, counted, and the
    exception propagates.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    queue = queue if queue is not None else FeatureQueue()
    if pools is None:
        pools = PerturbationPools.from_policy(policy)
    policy.check_dataset(dataset)

    records = list(dataset.records)
    tasks = []
    for epoch in range(epochs if records else 0):
        tasks.extend((epoch, records[i]) for i in epoch_order(len(records), policy.master_seed, epoch, iid))
    task_iter = iter(tasks)
    task_lock = threading.Lock()
    report = RunReport(epochs, workers, queue.capacity)
    latencies: dict = {s: [] for s in STAGES}
    stat_lock = threading.Lock()
    errors: list = []

    def next_task():
        with task_lock:
            return next(task_iter, None)

    def produce():
        while True:
            task = next_task()
            if task is None:
                return
            epoch, rec = task
            timings: dict = {}
            try:
                item = process_utterance(
                    rec, epoch, policy, pools, frontend, stats, codec_backend, load_audio, timings
                )
            except AudioLoadError as e:
                logger.warning("skipping unreadable audio: %s", e)
                with stat_lock:
                    report.skipped += 1
                    report.skipped_ids.append(rec.id)
                continue
            except Exception as e:  # propagated to the caller after shutdown
                errors.append(e)
                queue.close(discard=True)
                return
            try:
                timings["enqueue"] = queue.put(item)
            except QueueClosed:
                return
            with stat_lock:
                report.produced += 1
                for s in STAGES:
                    if s in timings:
                        latencies[s].append(timings[s])

    threads = [threading.Thread(target=produce, name=f"mdpipe-producer-{i}", daemon=True) for i in range(workers)]

    def close_when_done():
        for t in threads:
            t.join()
        queue.close()

    start = time.perf_counter()
    for t in threads:
        t.start()
    closer = threading.Thread(target=close_when_done, name="mdpipe-closer", daemon=True)
    closer.start()
    try:
        for item in queue:
            if consumer is not None:
                consumer(item)
            report.consumed += 1
            report.frames += item.features.rows
    except BaseException:
        report.dropped += queue.close(discard=True)
        raise
    finally:
        closer.join()
        report.wall_s = time.perf_counter() - start
        report.max_queue_occupancy = queue.max_occupancy
        report.queue_full_fraction = queue.blocked_s / (workers * report.wall_s) if report.wall_s > 0 else 0.0
        report.dropped = max(report.dropped, queue.dropped)
        report.stage_latency = {s: _latency_summary(v) for s, v in latencies.items()}
    if errors:
        raise errors[0]
    return report


class FeatureFileSink:
    """Consumer writing each item as ``<out_dir>/epoch<k>/<id>.lmfb`` plus a trace log."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._traces = open(self.out_dir / "traces.jsonl", "w", encoding="utf-8")

    def __call__(self, item: FeatureItem) -> None:
        write_lmfb(self.out_dir / f"epoch{item.epoch:03d}" / f"{item.utterance_id}.lmfb", item.features)
        rec = {"epoch": item.epoch, **item.trace.to_json()}
        self._traces.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        self._traces.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
