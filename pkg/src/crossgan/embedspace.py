"""Embedding extraction and retrieval.

Feature vectors come from the second-to-last layer of either the
discriminator (flattened final conv activations, width F) or the domain
classifier's hidden layer (width C, domain-adaptation checkpoints only).
Queries are exact: k-nearest-neighbor by Euclidean distance with frame-id
tie-breaking, and a greedy one-to-one frame matching for episode retrieval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .corpus import Corpus, ImageBatch, load_batch
from .errors import CrossganError
from .nets import CoGan, DannModel
from .train import GanPair, LoadedCheckpoint, load_models

SOURCES = ("discriminator", "classifier")


@dataclass
class EmbeddingIndex:
    """Immutable (N, D) matrix with frame-id and domain backreferences."""

    vectors: np.ndarray
    frame_ids: list[int]
    domains: list[str]
    source: str
    fingerprint: str

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise CrossganError("index vectors must be a 2-D matrix")
        if len(self.frame_ids) != self.vectors.shape[0]:
            raise CrossganError("frame_ids must align with vector rows")
        if len(self.domains) != self.vectors.shape[0]:
            raise CrossganError("domains must align with vector rows")
        self.vectors.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self):
        return int(self.vectors.shape[0])


def _loaded(checkpoint) -> LoadedCheckpoint:
    if isinstance(checkpoint, LoadedCheckpoint):
        return checkpoint
    return load_models(checkpoint)


def embed(checkpoint, images, source: str = "discriminator",
          domain: str | None = None) -> np.ndarray:
    """Penultimate-layer features for a batch of images, rows input-aligned."""
    if source not in SOURCES:
        raise CrossganError(f"unknown embedding source {source!r}; expected {SOURCES}")
    lc = _loaded(checkpoint)
    model = lc.model
    model.eval()
    x = torch.from_numpy(images.data) if isinstance(images, ImageBatch) else torch.as_tensor(images)
    with torch.no_grad():
        if isinstance(model, DannModel):
            if source == "classifier":
                _, penult = model.classify(x)
                return penult.numpy()
            return model.discriminate(x).features.numpy()
        if source == "classifier":
            raise CrossganError(
                f"classifier embeddings need a dann checkpoint, got {lc.regime!r}"
            )
        if isinstance(model, GanPair):
            return model.disc(x).features.numpy()
        if isinstance(model, CoGan):
            disc = model.discriminator(domain or "S")
            return disc(x).features.numpy()
    raise CrossganError(f"cannot embed with a {type(model).__name__}")


def build_index(checkpoint, corpus: Corpus, source: str = "discriminator",
                resolution: int | None = None, batch: int = 32,
                domain: str | None = None) -> EmbeddingIndex:
    """One embedding row per corpus frame, in corpus order."""
    if len(corpus) == 0:
        raise CrossganError("cannot index an empty corpus")
    lc = _loaded(checkpoint)
    res = resolution or lc.config.resolution
    rows = []
    ids = [r.frame_id for r in corpus.records]
    for start in range(0, len(ids), batch):
        chunk = load_batch(corpus, ids[start:start + batch], res)
        rows.append(embed(lc, chunk, source, domain))
    vectors = np.concatenate(rows, axis=0).astype(np.float32)
    return EmbeddingIndex(
        vectors=vectors,
        frame_ids=ids,
        domains=[r.domain for r in corpus.records],
        source=source,
        fingerprint=lc.fingerprint,
    )


def save_index(index: EmbeddingIndex, path: str | Path):
    """JSON manifest line followed by the binary matrix record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "source": index.source,
        "dim": index.dim,
        "count": len(index),
        "fingerprint": index.fingerprint,
        "frame_ids": index.frame_ids,
        "domains": index.domains,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        ckpt_io.write_record(f, index.vectors)


def load_index(path: str | Path) -> EmbeddingIndex:
    path = Path(path)
    if not path.is_file():
        raise CrossganError(f"no index file at {path}")
    with open(path, "rb") as f:
        manifest = json.loads(f.readline().decode("utf-8"))
        vectors = ckpt_io.read_record(f)
    if vectors.shape != (manifest["count"], manifest["dim"]):
        raise CrossganError(f"{path}: matrix shape does not match manifest")
    return EmbeddingIndex(
        vectors=vectors,
        frame_ids=list(manifest["frame_ids"]),
        domains=list(manifest["domains"]),
        source=manifest["source"],
        fingerprint=manifest["fingerprint"],
    )


def knn(index: EmbeddingIndex, query: np.ndarray, k: int,
        domain_filter: str | None = None) -> list[tuple[int, float]]:
    """Exact top-k by Euclidean distance, ascending; ties broken by ascending
    frame_id; k clamped to the filtered row count."""
    if k < 1:
        raise CrossganError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise CrossganError(f"query dimension {q.shape[0]} != index dimension {index.dim}")
    if domain_filter is None:
        rows = np.arange(len(index))
    else:
        rows = np.array([i for i, d in enumerate(index.domains) if d == domain_filter],
                        dtype=int)
        if rows.size == 0:
            raise CrossganError(f"no indexed frames in domain {domain_filter!r}")
    vecs = index.vectors[rows].astype(np.float64)
    dists = np.sqrt(((vecs - q) ** 2).sum(axis=1))
    ids = np.array([index.frame_ids[i] for i in rows])
    order = np.lexsort((ids, dists))[: min(k, rows.size)]
    return [(int(ids[i]), float(dists[i])) for i in order]


@dataclass
class EpisodeBag:
    """An episode viewed as a bag of frame embeddings."""

    episode_id: str
    domain: str
    vectors: np.ndarray
    frame_ids: list[int]

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise CrossganError(f"episode {self.episode_id!r} has no frames")
        if len(self.frame_ids) != self.vectors.shape[0]:
            raise CrossganError("frame_ids must align with bag rows")

    def __len__(self):
        return int(self.vectors.shape[0])


def episode_bags(index: EmbeddingIndex, corpus: Corpus) -> dict[str, EpisodeBag]:
    """Group index rows by the corpus's episode structure."""
    row_of = {fid: i for i, fid in enumerate(index.frame_ids)}
    bags = {}
    for ep_id, frames in corpus.episodes.items():
        try:
            rows = [row_of[r.frame_id] for r in frames]
        except KeyError as missing:
            raise CrossganError(
                f"episode {ep_id!r} frame {missing} not present in index"
            ) from None
        bags[ep_id] = EpisodeBag(
            episode_id=ep_id,
            domain=frames[0].domain,
            vectors=index.vectors[rows],
            frame_ids=[r.frame_id for r in frames],
        )
    return bags


def greedy_match(a: EpisodeBag, b: EpisodeBag) -> list[tuple[int, int, float]]:
    """One-to-one frame pairing: walk all cross pairs in ascending distance,
    accept a pair only when both frames are still free, stop once every frame
    of the smaller bag is paired. Returns (frame_id_a, frame_id_b, distance)
    in acceptance order."""
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise CrossganError("episode bags have different embedding dimensions")
    va = a.vectors.astype(np.float64)
    vb = b.vectors.astype(np.float64)
    d = np.sqrt(((va[:, None, :] - vb[None, :, :]) ** 2).sum(axis=2))
    order = np.lexsort(
        (np.tile(np.arange(len(b)), len(a)),
         np.repeat(np.arange(len(a)), len(b)),
         d.ravel())
    )
    target = min(len(a), len(b))
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for flat in order:
        i, j = divmod(int(flat), len(b))
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((a.frame_ids[i], b.frame_ids[j], float(d[i, j])))
        if len(pairs) == target:
            break
    return pairs


def episode_distance(query: EpisodeBag, candidate: EpisodeBag,
                     aggregate: str = "min") -> float:
    """Bag-of-frames distance: the minimum accepted pair distance under the
    greedy matching (or the mean of accepted pairs with aggregate="mean")."""
    pairs = greedy_match(query, candidate)
    dists = [p[2] for p in pairs]
    if aggregate == "min":
        return min(dists)
    if aggregate == "mean":
        return float(np.mean(dists))
    raise CrossganError(f"unknown aggregate {aggregate!r}; expected min or mean")


def retrieve_episodes(query: EpisodeBag, candidates: list[EpisodeBag], top: int,
                      aggregate: str = "min"):
    """Rank candidates by episode distance ascending (ties by episode_id).

    Returns (ranked, top_pairs): ranked is a list of (episode_id, distance)
    clamped to ``top``; top_pairs holds the accepted frame pairs against the
    best-ranked candidate, for matched-frame rendering.
    """
    if not candidates:
        raise CrossganError("no candidate episodes")
    if top < 1:
        raise CrossganError("top must be >= 1")
    scored = sorted(
        ((episode_distance(query, c, aggregate), c.episode_id, c) for c in candidates),
        key=lambda x: (x[0], x[1]),
    )
    ranked = [(ep_id, dist) for dist, ep_id, _ in scored[:top]]
    top_pairs = greedy_match(query, scored[0][2])
    return ranked, top_pairs
