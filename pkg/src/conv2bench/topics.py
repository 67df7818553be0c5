"""Embed first user messages, cluster them, and screen clusters by keyword.

The clustering tier is deliberately cheap: a small embedding of each
conversation's opening message, density clustering over a reduced projection
(k-means fallback for small corpora), then a lexicon screen over each
cluster's top terms.  An LLM classifier downstream removes the false
positives this tier lets through, so min_hits defaults to 1.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .corpus import Conversation

logger = logging.getLogger(__name__)

OUTLIER = -1

# Keeps "c++", "c#", "node.js" and friends as single tokens.
_TOKEN_RE = re.compile(r"[a-z0-9_#+]+(?:[.\-][a-z0-9_#+]+)*")


class TopicsError(Exception):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# Embedding providers
# ---------------------------------------------------------------------------


class EmbeddingProvider(Protocol):
    """Maps (conv_id, first-message text) pairs to dense vectors."""

    dim: int

    def embed(self, ids: Sequence[str], texts: Sequence[str]) -> np.ndarray: ...


class HashEmbeddingProvider:
    """Deterministic offline embeddings derived from a hash of the text.

    Identical texts map to identical vectors, which is all the downstream
    pipeline needs for tests and dry runs.
    """

    def __init__(self, dim: int = 32):
        self.dim = dim

    def embed(self, ids: Sequence[str], texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            vec = np.random.Generator(np.random.Philox(key=seed)).standard_normal(self.dim)
            out[i] = vec / np.linalg.norm(vec)
        return out


class PrecomputedEmbeddingProvider:
    """Vectors loaded from a JSONL file of {"conv_id": ..., "vector": [...]}."""

    def __init__(self, path: str | Path):
        self._vectors: dict[str, np.ndarray] = {}
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                self._vectors[str(rec["conv_id"])] = np.asarray(rec["vector"], dtype=float)
        if not self._vectors:
            raise TopicsError(f"no vectors in {path}")
        dims = {v.shape[0] for v in self._vectors.values()}
        if len(dims) != 1:
            raise TopicsError(f"inconsistent vector dims in {path}: {sorted(dims)}")
        self.dim = dims.pop()

    def embed(self, ids: Sequence[str], texts: Sequence[str]) -> np.ndarray:
        rows = []
        for conv_id in ids:
            if conv_id not in self._vectors:
                raise KeyError(conv_id)
            rows.append(self._vectors[conv_id])
        return np.vstack(rows) if rows else np.zeros((0, self.dim))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingMatrix:
    conv_ids: list[str]
    vectors: np.ndarray  # shape (len(conv_ids), dim)
    dim: int

    def __post_init__(self):
        if self.vectors.shape != (len(self.conv_ids), self.dim):
            raise TopicsError(
                f"vector shape {self.vectors.shape} does not match "
                f"({len(self.conv_ids)}, {self.dim})"
            )
        if self.vectors.size and not np.all(np.isfinite(self.vectors)):
            raise TopicsError("embedding matrix contains non-finite values")


@dataclass
class ClusterAssignment:
    labels: dict[str, int]  # conv_id -> cluster id (-1 = outlier)
    top_terms: dict[int, list[str]]

    def members(self, cluster_id: int) -> list[str]:
        return sorted(cid for cid, lab in self.labels.items() if lab == cluster_id)

    def cluster_ids(self) -> list[int]:
        return sorted({lab for lab in self.labels.values() if lab != OUTLIER})


@dataclass
class Lexicon:
    terms: set[str]
    name: str = "lexicon"

    def __post_init__(self):
        if not self.terms:
            raise TopicsError("lexicon is empty")
        self.terms = {t.strip().lower() for t in self.terms if t.strip()}

    @classmethod
    def from_file(cls, path: str | Path) -> "Lexicon":
        """One keyword per line; blank lines and '#' comments are skipped."""
        terms = set()
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    terms.add(line.lower())
        return cls(terms=terms, name=path.stem)


@dataclass
class EmbedFailure:
    conv_id: str
    error: str


@dataclass
class ClusterParams:
    method: str = "auto"  # auto | density | kmeans
    n_clusters: int | None = None  # kmeans only; None -> silhouette scan
    max_kmeans_clusters: int = 10
    min_cluster_size: int = 5  # density only
    reduce_dim: int | None = 5
    density_threshold: int = 500  # below this, auto falls back to kmeans
    top_terms_k: int = 10


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def embed(
    convs: Sequence[Conversation],
    provider: EmbeddingProvider,
    retries: int = 2,
    batch_size: int = 64,
    max_workers: int = 1,
) -> tuple[EmbeddingMatrix, list[EmbedFailure]]:
    """One vector per conversation, computed from the first user message only.

    Batches may run with bounded parallelism (max_workers); results assemble
    in input order either way.  Failed items are retried, then reported in
    the failure list; if every item fails the run aborts.
    """
    ids = [c.conv_id for c in convs]
    texts = [c.first_user_text for c in convs]
    if not ids:
        return EmbeddingMatrix([], np.zeros((0, provider.dim)), provider.dim), []

    batches = [
        (ids[start : start + batch_size], texts[start : start + batch_size])
        for start in range(0, len(ids), batch_size)
    ]
    rows: dict[str, np.ndarray] = {}
    failures: list[EmbedFailure] = []

    def consume(results) -> None:
        for conv_id, value in results:
            if isinstance(value, np.ndarray):
                rows[conv_id] = value
            else:
                failures.append(EmbedFailure(conv_id, value))

    if max_workers > 1 and len(batches) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for results in pool.map(
                lambda b: list(_embed_batch(provider, b[0], b[1], retries)), batches
            ):
                consume(results)
    else:
        for batch_ids, batch_texts in batches:
            consume(_embed_batch(provider, batch_ids, batch_texts, retries))

    if not rows:
        raise TopicsError("embedding failed for every conversation")
    kept_ids = [cid for cid in ids if cid in rows]
    matrix = np.vstack([rows[cid] for cid in kept_ids])
    return EmbeddingMatrix(kept_ids, matrix, matrix.shape[1]), failures


def _embed_batch(provider, batch_ids, batch_texts, retries):
    """Yield (conv_id, vector | error string); retries whole batch then items."""
    for attempt in range(retries + 1):
        try:
            vecs = provider.embed(batch_ids, batch_texts)
            for cid, vec in zip(batch_ids, vecs):
                yield cid, np.asarray(vec, dtype=float)
            return
        except Exception as exc:  # noqa: BLE001 - provider errors are opaque
            if attempt == retries:
                logger.warning("embedding batch failed after retries: %s", exc)
    # Batch kept failing; try items one by one so one bad record
    # does not sink its neighbours.
    for cid, text in zip(batch_ids, batch_texts):
        try:
            vec = provider.embed([cid], [text])[0]
            yield cid, np.asarray(vec, dtype=float)
        except Exception as exc:  # noqa: BLE001
            yield cid, f"{type(exc).__name__}: {exc}"


def cluster(
    emb: EmbeddingMatrix,
    texts: dict[str, str],
    params: ClusterParams | None = None,
    seed: int = 0,
) -> ClusterAssignment:
    """Assign a thematic cluster to every embedded conversation.

    Density clustering (HDBSCAN over a PCA projection) for large corpora,
    k-means for small ones.  Reproducible for a given seed.  Top terms per
    cluster are the highest class-contrast tokens of member first messages.
    """
    if params is None:
        params = ClusterParams()
    n = len(emb.conv_ids)
    if n < 2:
        raise TopicsError("clustering needs at least 2 conversations")

    vectors = emb.vectors
    if np.allclose(vectors, vectors[0]):
        labels = np.zeros(n, dtype=int)
    else:
        method = params.method
        if method == "auto":
            method = "density" if n >= params.density_threshold else "kmeans"
        if method == "kmeans":
            labels = _kmeans_labels(vectors, params, seed)
        elif method == "density":
            labels = _density_labels(vectors, params, seed)
        else:
            raise TopicsError(f"unknown clustering method: {params.method!r}")

    assignment = {cid: int(lab) for cid, lab in zip(emb.conv_ids, labels)}
    top_terms = _class_contrast_terms(assignment, texts, params.top_terms_k)
    return ClusterAssignment(labels=assignment, top_terms=top_terms)


def _kmeans_labels(vectors: np.ndarray, params: ClusterParams, seed: int) -> np.ndarray:
    from sklearn.cluster import KMeans
    from sklearn.metrics import silhouette_score

    n = vectors.shape[0]
    if params.n_clusters is not None:
        k = min(params.n_clusters, n)
        return KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(vectors)

    best_k, best_score, best_labels = None, -np.inf, None
    for k in range(2, min(params.max_kmeans_clusters, n - 1) + 1):
        labels = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(vectors)
        if len(set(labels)) < 2:
            continue
        score = silhouette_score(vectors, labels)
        if score > best_score + 1e-12:
            best_k, best_score, best_labels = k, score, labels
    if best_labels is None:
        return np.zeros(n, dtype=int)
    logger.debug("kmeans silhouette scan chose k=%d (score %.3f)", best_k, best_score)
    return best_labels


def _density_labels(vectors: np.ndarray, params: ClusterParams, seed: int) -> np.ndarray:
    from sklearn.cluster import HDBSCAN
    from sklearn.decomposition import PCA

    reduced = vectors
    if params.reduce_dim and vectors.shape[1] > params.reduce_dim:
        reduced = PCA(n_components=params.reduce_dim, random_state=seed).fit_transform(vectors)
    labels = HDBSCAN(min_cluster_size=params.min_cluster_size).fit_predict(reduced)
    if set(labels) == {OUTLIER}:
        # Degenerate density estimate; everything in one cluster beats all-noise.
        return np.zeros(vectors.shape[0], dtype=int)
    return labels


def _class_contrast_terms(
    labels: dict[str, int], texts: dict[str, str], k: int
) -> dict[int, list[str]]:
    """Class-based tf-idf: term frequency within the cluster, normalized by
    the term's frequency across all clusters."""
    counts: dict[int, Counter] = {}
    for conv_id, lab in labels.items():
        if lab == OUTLIER:
            continue
        counts.setdefault(lab, Counter()).update(tokenize(texts.get(conv_id, "")))
    if not counts:
        return {}

    global_freq: Counter = Counter()
    for c in counts.values():
        global_freq.update(c)
    avg_tokens = sum(sum(c.values()) for c in counts.values()) / len(counts)

    top: dict[int, list[str]] = {}
    for lab, ctr in counts.items():
        total = sum(ctr.values())
        if total == 0:
            top[lab] = []
            continue
        scored = [
            (tf / total * np.log(1.0 + avg_tokens / global_freq[t]), t)
            for t, tf in ctr.items()
        ]
        scored.sort(key=lambda st: (-st[0], st[1]))
        top[lab] = [t for _, t in scored[:k]]
    return top


def screen(assign: ClusterAssignment, lex: Lexicon, min_hits: int = 1) -> set[int]:
    """Clusters whose top terms contain at least min_hits lexicon keywords.

    Whole-token, lowercase matching, so "scala" does not match "escalate".
    """
    if min_hits < 1:
        raise TopicsError("min_hits must be >= 1")
    selected = set()
    for cluster_id, terms in assign.top_terms.items():
        hits = sum(1 for t in terms if t in lex.terms)
        if hits >= min_hits:
            selected.add(cluster_id)
    return selected


def sample_candidates(
    convs: Sequence[Conversation],
    assign: ClusterAssignment,
    selected: Iterable[int],
    n: int,
    seed: int = 0,
) -> list[Conversation]:
    """Uniform sample without replacement from the selected clusters.

    Returns all candidates when fewer than n exist.  Output is sorted by
    conv_id so downstream stages are order-stable.
    """
    if n < 1:
        raise TopicsError("sample size must be >= 1")
    selected = set(selected)
    pool = sorted(
        (c for c in convs if assign.labels.get(c.conv_id) in selected),
        key=lambda c: c.conv_id,
    )
    if not pool:
        logger.warning("candidate pool is empty; nothing to sample")
        return []
    if len(pool) <= n:
        return pool
    rng = np.random.Generator(np.random.Philox(key=seed))
    idx = rng.choice(len(pool), size=n, replace=False)
    return sorted((pool[i] for i in idx), key=lambda c: c.conv_id)
