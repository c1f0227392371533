"""Utterance embeddings and cluster-validity metrics for comparing domains.

The embedder summarizes a logmel matrix by its per-dimension mean and
standard deviation and projects that 256-dim summary onto 32 principal
components fitted on reference utterances. Any other fixed-dimension
embedding (e.g. i-vectors computed elsewhere) can be loaded from JSONL and
fed to the same metrics.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Iterable, Optional, Sequence

import numpy as np

EMBED_DIM = 32

REPORT_CAPTION = (
    "Each domain scored against the target domain; "
    "a smaller silhouette or a larger similarity means the two clusters overlap more."
)


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    utterance_id: str
    domain: str

    def to_json(self) -> dict:
        return {"id": self.utterance_id, "domain": self.domain, "vector": [float(v) for v in self.vector]}

    @classmethod
    def from_json(cls, obj: dict) -> "Embedding":
        vec = np.asarray(obj["vector"], dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise ClusterError(f"embedding {obj.get('id')!r} has non-finite components")
        return cls(vec, str(obj["id"]), str(obj["domain"]))


def save_embeddings(path, embeddings: Iterable[Embedding]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for e in embeddings:
            f.write(json.dumps(e.to_json()) + "\n")


def load_embeddings(path) -> list[Embedding]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(Embedding.from_json(json.loads(line)))
    dims = {e.vector.shape[0] for e in out}
    if len(dims) > 1:
        raise ClusterError(f"mixed embedding dimensions {sorted(dims)}")
    return out


def summarize(features) -> np.ndarray:
    """Concatenated per-dimension mean and (population) std over frames."""
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ClusterError("cannot summarize an empty feature matrix")
    return np.concatenate([x.mean(axis=0), x.std(axis=0)])


class PCAProjector:
    """Principal-component projection fitted with a symmetric eigendecomposition."""

    def __init__(self, n_components: int = EMBED_DIM):
        self.n_components = n_components
        self.mean_: Optional[np.ndarray] = None
        self.components_: Optional[np.ndarray] = None
        self.explained_variance_: Optional[np.ndarray] = None

    @property
    def fitted(self) -> bool:
        return self.components_ is not None

    def fit(self, summaries: np.ndarray) -> "PCAProjector":
        x = np.asarray(summaries, dtype=np.float64)
        if x.shape[0] < self.n_components:
            raise ClusterError(
                f"need at least {self.n_components} reference utterances to fit, got {x.shape[0]}"
            )
        if x.shape[1] < self.n_components:
            raise ClusterError(f"summary dim {x.shape[1]} < {self.n_components} components")
        self.mean_ = x.mean(axis=0)
        cov = np.cov(x - self.mean_, rowvar=False, bias=True)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][: self.n_components]
        comps = evecs[:, order].T
        # sign convention: largest-magnitude loading positive, for reproducible output
        flip = np.sign(comps[np.arange(comps.shape[0]), np.argmax(np.abs(comps), axis=1)])
        self.components_ = comps * flip[:, None]
        self.explained_variance_ = evals[order]
        return self

    def transform(self, summaries: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise ClusterError("projector is not fitted")
        return (np.asarray(summaries, dtype=np.float64) - self.mean_) @ self.components_.T

    def reconstruct(self, summaries: np.ndarray, k: Optional[int] = None) -> np.ndarray:
        """Back-project through the first ``k`` components."""
        if not self.fitted:
            raise ClusterError("projector is not fitted")
        comps = self.components_[: (k or self.n_components)]
        z = (np.asarray(summaries, dtype=np.float64) - self.mean_) @ comps.T
        return z @ comps + self.mean_

    def to_json(self) -> dict:
        if not self.fitted:
            raise ClusterError("projector is not fitted")
        return {"mean": self.mean_.tolist(), "components": self.components_.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "PCAProjector":
        comps = np.asarray(obj["components"], dtype=np.float64)
        p = cls(comps.shape[0])
        p.mean_ = np.asarray(obj["mean"], dtype=np.float64)
        p.components_ = comps
        return p


def embed(features, projector: PCAProjector, utterance_id: str = "", domain: str = "") -> Embedding:
    if not projector.fitted:
        raise ClusterError("projector is not fitted")
    return Embedding(projector.transform(summarize(features)), utterance_id, domain)


@dataclass
class SilhouetteResult:
    scores: np.ndarray
    a: np.ndarray
    b: np.ndarray
    labels: list
    per_cluster: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def silhouette(points, labels: Sequence[Hashable]) -> SilhouetteResult:
    """Per-point silhouette (b - a) / max(a, b) with Euclidean distances.

    a(i) is the mean distance to the other members of i's cluster and b(i) the
    smallest mean distance to any other cluster (ties go to the lowest label).
    Points in singleton clusters score 0.
    """
    x = _as_points(points)
    labels = list(labels)
    if len(labels) != x.shape[0]:
        raise ClusterError("labels and points differ in length")
    uniq = sorted(set(labels))
    if len(uniq) < 2:
        raise ClusterError("silhouette needs at least 2 clusters")
    code = np.array([uniq.index(lab) for lab in labels])
    # the direct differences are slower than the Gram trick but exact to rounding
    dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2))
    k = len(uniq)
    onehot = (code[:, None] == np.arange(k)[None, :]).astype(np.float64)
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot  # sum of distances from each point to each cluster
    own = sizes[code]
    a = np.where(own > 1, sums[np.arange(len(code)), code] / np.maximum(own - 1, 1), 0.0)
    mean_to = sums / sizes[None, :]
    mean_to[np.arange(len(code)), code] = np.inf
    b = mean_to.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    per_cluster = {lab: float(s[code == i].mean()) for i, lab in enumerate(uniq)}
    return SilhouetteResult(s, a, b, labels, per_cluster)


@dataclass(frozen=True)
class ClusterSimilarity:
    r: float
    s_i: float
    s_j: float
    m_ij: float


def cluster_similarity(cluster_i, cluster_j) -> ClusterSimilarity:
    """(S_i + S_j) / M_ij with S the mean distance to the centroid and M the centroid distance."""
    xi, xj = _as_points(cluster_i), _as_points(cluster_j)
    if xi.shape[0] == 0 or xj.shape[0] == 0:
        raise ClusterError("clusters must be non-empty")
    ci, cj = xi.mean(axis=0), xj.mean(axis=0)
    s_i = float(np.linalg.norm(xi - ci, axis=1).mean())
    s_j = float(np.linalg.norm(xj - cj, axis=1).mean())
    m = float(np.linalg.norm(ci - cj))
    if m == 0.0:
        raise ClusterError("cluster centroids coincide; similarity is undefined")
    return ClusterSimilarity((s_i + s_j) / m, s_i, s_j, m)


@dataclass(frozen=True)
class ReportRow:
    domain: str
    average_silhouette: float
    cluster_similarity: float


@dataclass
class PairwiseReport:
    target_domain: str
    n_per_domain: int
    seed: int
    rows: list

    def to_text(self) -> str:
        width = max([len("Domain")] + [len(r.domain) for r in self.rows])
        lines = [
            f"# {REPORT_CAPTION}",
            f"# target={self.target_domain} n_per_domain={self.n_per_domain} seed={self.seed}",
            "# average silhouette is taken over the points of both clusters",
            f"{'Domain':<{width}}  {'Average silhouette':>18}  {'Cluster similarity':>18}",
        ]
        for r in self.rows:
            lines.append(f"{r.domain:<{width}}  {r.average_silhouette:>18.4f}  {r.cluster_similarity:>18.2f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "average_silhouette", "cluster_similarity"])
        for r in self.rows:
            w.writerow([r.domain, repr(r.average_silhouette), repr(r.cluster_similarity)])
        return buf.getvalue()


def _pair_row(domain: str, own: np.ndarray, target: np.ndarray) -> ReportRow:
    points = np.vstack([own, target])
    labels = [0] * own.shape[0] + [1] * target.shape[0]
    sil = silhouette(points, labels)
    try:
        r = cluster_similarity(own, target).r
    except ClusterError:
        r = float("inf")
    return ReportRow(domain, sil.mean, r)


def pairwise_report_from_embeddings(
    embeddings: Sequence[Embedding], target_domain: str, n_per_domain: int, seed: int
) -> PairwiseReport:
    """Compare each domain against the target using ``n_per_domain`` seeded samples from each."""
    groups: dict[str, list[Embedding]] = {}
    for e in embeddings:
        groups.setdefault(e.domain, []).append(e)
    if target_domain not in groups:
        raise ClusterError(f"target domain {target_domain!r} not present")
    for dom, items in groups.items():
        if len(items) < n_per_domain:
            raise ClusterError(f"domain {dom!r} has {len(items)} utterances, fewer than n={n_per_domain}")
    rng = np.random.default_rng(seed)
    picked = {}
    for dom in sorted(groups):
        items = sorted(groups[dom], key=lambda e: e.utterance_id)
        idx = np.sort(rng.choice(len(items), size=n_per_domain, replace=False))
        picked[dom] = np.vstack([items[i].vector for i in idx])
    rows = [
        _pair_row(dom, picked[dom], picked[target_domain]) for dom in sorted(groups) if dom != target_domain
    ]
    return PairwiseReport(target_domain, n_per_domain, seed, rows)


def sample_per_domain(dataset, target_domain: str, n_per_domain: int, seed: int) -> dict:
    """Seeded sample of ``n_per_domain`` records from every domain of a pooled dataset."""
    groups = dataset.by_domain()
    if target_domain not in groups:
        raise ClusterError(f"target domain {target_domain!r} not present")
    for dom, recs in groups.items():
        if len(recs) < n_per_domain:
            raise ClusterError(f"domain {dom!r} has {len(recs)} utterances, fewer than n={n_per_domain}")
    rng = np.random.default_rng(seed)
    out = {}
    for dom in sorted(groups):
        recs = sorted(groups[dom], key=lambda r: r.id)
        idx = np.sort(rng.choice(len(recs), size=n_per_domain, replace=False))
        out[dom] = [recs[i] for i in idx]
    return out


def pairwise_report(
    dataset,
    target_domain: str,
    n_per_domain: int,
    seed: int,
    featurize: Callable,
    projector: Optional[PCAProjector] = None,
) -> PairwiseReport:
    """Sample, featurize and embed utterances, then score each domain against the target.

    ``featurize`` maps an UtteranceRecord to a 128-dim logmel matrix. Without a
    projector, one is fitted on the summaries of all sampled utterances.
    """
    sampled = sample_per_domain(dataset, target_domain, n_per_domain, seed)
    summaries = {dom: np.vstack([summarize(featurize(r)) for r in recs]) for dom, recs in sampled.items()}
    if projector is None:
        projector = PCAProjector().fit(np.vstack([summaries[d] for d in sorted(summaries)]))
    vectors = {dom: projector.transform(s) for dom, s in summaries.items()}
    rows = [_pair_row(dom, vectors[dom], vectors[target_domain]) for dom in sorted(vectors) if dom != target_domain]
    return PairwiseReport(target_domain, n_per_domain, seed, rows)
