"""Descriptor database, exact KNN retrieval, and joint-probability ranking."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .cloud import Segment, preprocess_segment
from .errors import DegenerateSegmentError
from .network import Descriptor, DescriptorModel, describe

log = logging.getLogger(__name__)

DB_MAGIC = b"ESMDB1"


@dataclass
class MatchCandidate:
    query_id: int
    map_id: int
    distance: float  # descriptor-space Euclidean distance
    joint_prob: float  # quality_query * quality_map
    query_centroid: np.ndarray | None = None  # meters, query sensor frame
    map_centroid: np.ndarray | None = None  # meters, map frame

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("distance must be >= 0")
        if not 0.0 <= self.joint_prob <= 1.0:
            raise ValueError("joint_prob must be in [0,1]")


@dataclass
class SegmentDatabase:
    """Immutable store of map segment descriptors.

    Embeddings are float32 (the on-disk representation) so the in-memory
    database round-trips bitwise through save/load.
    """

    ids: np.ndarray  # (N,) int64, unique
    embeddings: np.ndarray  # (N, D) float32
    qualities: np.ndarray  # (N,) float32
    centroids: np.ndarray  # (N, 3) float64, map frame
    skipped: int = 0  # degenerate input segments dropped during build

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.qualities = np.asarray(self.qualities, dtype=np.float32)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if len(set(self.ids.tolist())) != len(self.ids):
            raise ValueError("segment ids must be unique")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings must be finite")

    def __len__(self):
        return len(self.ids)


def build_database(
    model: DescriptorModel,
    segments: list[Segment],
    map_pose=None,
    seed: int = 0,
    threads: int = 1,
) -> SegmentDatabase:
    """Describe every segment and assemble the database.

    Degenerate segments (zero extent) are skipped with a warning and
    counted in `db.skipped`. Centroids are the pre-normalization segment
    centroids, mapped through `map_pose` when the source cloud is not
    already in the map frame.
    """
    ids, embs, quals, cents = [], [], [], []
    normalized = []
    for i, seg in enumerate(segments):
        try:
            normalized.append(
                (i, preprocess_segment(seg, target=model.n_points, seed=seed + i))
            )
        except DegenerateSegmentError as err:
            log.warning("skipping degenerate segment %d: %s", i, err)
    from .network import describe_batch  # local import to keep module load light

    descs = describe_batch(model, [ns for _, ns in normalized], threads=threads)
    for (i, ns), desc in zip(normalized, descs):
        ids.append(i)
        embs.append(desc.embedding)
        quals.append(desc.quality)
        c = ns.centroid if map_pose is None else map_pose.apply(ns.centroid[None])[0]
        cents.append(c)
    n = len(ids)
    return SegmentDatabase(
        ids=np.array(ids, dtype=np.int64),
        embeddings=np.array(embs, dtype=np.float32).reshape(n, model.embed_dim),
        qualities=np.array(quals, dtype=np.float32),
        centroids=np.array(cents, dtype=np.float64).reshape(n, 3),
        skipped=len(segments) - n,
    )


def knn_query(
    db: SegmentDatabase,
    query: Descriptor,
    k: int,
    query_id: int = 0,
    query_centroid=None,
) -> list[MatchCandidate]:
    """Exact k nearest database entries by embedding distance, ascending.

    Ties break by ascending segment id. Returns min(k, len(db)) candidates.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(db) == 0:
        return []
    q = query.embedding.astype(np.float32)
    d = np.sqrt(np.sum((db.embeddings - q) ** 2, axis=1, dtype=np.float64))
    order = np.lexsort((db.ids, d))[: min(k, len(db))]
    return [
        MatchCandidate(
            query_id=query_id,
            map_id=int(db.ids[i]),
            distance=float(d[i]),
            joint_prob=float(query.quality * db.qualities[i]),
            query_centroid=None if query_centroid is None else np.asarray(query_centroid, float),
            map_centroid=db.centroids[i],
        )
        for i in order
    ]


def rank_matches(candidates: list[MatchCandidate]) -> list[MatchCandidate]:
    """Sort descending by joint probability; ties by distance, then ids."""
    return sorted(
        candidates,
        key=lambda c: (-c.joint_prob, c.distance, c.query_id, c.map_id),
    )


def prune_candidates(candidates, min_joint_prob: float = 0.0):
    """Drop candidates below the joint-probability cutoff (0 disables)."""
    if min_joint_prob <= 0.0:
        return list(candidates)
    return [c for c in candidates if c.joint_prob >= min_joint_prob]


def recall_at_k(embeddings: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of samples whose k nearest others include a same-class entry."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(emb)
    if n < 2:
        raise ValueError("need at least 2 samples")
    sq = np.sum(emb * emb, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T
    np.fill_diagonal(d2, np.inf)
    hits = 0
    for i in range(n):
        nearest = np.argsort(d2[i], kind="stable")[:k]
        hits += bool(np.any(labels[nearest] == labels[i]))
    return hits / n


# -------------------------------------------------------------- persistence

EMBED_DIM = 16


def save_database(db: SegmentDatabase, path) -> None:
    """Binary layout: magic, u64 entry count, then per entry
    i64 id, 3x f64 centroid, 16x f32 embedding, f32 quality (little-endian)."""
    if len(db) and db.embeddings.shape[1] != EMBED_DIM:
        raise ValueError(f"database format stores {EMBED_DIM}-dim embeddings")
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<Q", len(db)))
        for i in range(len(db)):
            fh.write(struct.pack("<q", int(db.ids[i])))
            fh.write(db.centroids[i].astype("<f8").tobytes())
            fh.write(db.embeddings[i].astype("<f4").tobytes())
            fh.write(struct.pack("<f", float(db.qualities[i])))


def load_database(path) -> SegmentDatabase:
    with open(path, "rb") as fh:
        magic = fh.read(len(DB_MAGIC))
        if magic != DB_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        count = struct.unpack("<Q", fh.read(8))[0]
        dim = EMBED_DIM
        ids = np.empty(count, dtype=np.int64)
        cents = np.empty((count, 3), dtype=np.float64)
        embs = np.empty((count, dim), dtype=np.float32)
        quals = np.empty(count, dtype=np.float32)
        entry = 8 + 24 + 4 * dim + 4
        for i in range(count):
            raw = fh.read(entry)
            if len(raw) != entry:
                raise ValueError(f"{path}: truncated at entry {i}")
            ids[i] = struct.unpack_from("<q", raw, 0)[0]
            cents[i] = np.frombuffer(raw, dtype="<f8", count=3, offset=8)
            embs[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=32)
            quals[i] = struct.unpack_from("<f", raw, 32 + 4 * dim)[0]
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return SegmentDatabase(
        ids=ids, embeddings=embs.reshape(count, dim), qualities=quals, centroids=cents
    )
