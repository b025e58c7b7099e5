"""Partitioned knowledge store with exact maximum-inner-product search."""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

PARTITIONS = ("phy", "prot", "hist")
COMPARATORS = (">", "<")
RULE_KEYS = ("variable", "op", "value", "unit", "directive")
FRONT_MATTER_KEYS = ("id", "title") + RULE_KEYS

CORPUS_DIR = Path(__file__).parent / "corpus"


class KnowledgeFormatError(ValueError):
    pass


class DuplicateChunkError(ValueError):
    pass


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


_TOKEN = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Seeded feature hashing of word uni- and bigrams, L2-normalised.

    Deterministic across processes (uses blake2b, not ``hash``).
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _features(self, text: str) -> list[str]:
        toks = _TOKEN.findall(text.lower())
        return toks + [f"{a}_{b}" for a, b in zip(toks, toks[1:])]

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for feat in self._features(text):
            h = int.from_bytes(hashlib.blake2b(f"{self.seed}:{feat}".encode(), digest_size=8).digest(), "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


class RemoteEmbedder:
    """Embeddings over HTTP: POST ``{"input": text}``, expects ``{"data": [{"embedding": [...]}]}``.

    Endpoint and key come from ``FLOWAGENT_EMBED_URL`` / ``FLOWAGENT_API_KEY``.
    """

    def __init__(self, dim: int, url: str | None = None, timeout: float = 30.0):
        self.dim = dim
        self.url = url or os.environ.get("FLOWAGENT_EMBED_URL", "")
        self.timeout = timeout
        if not self.url:
            raise ValueError("no embedding endpoint configured (set FLOWAGENT_EMBED_URL)")

    def embed(self, text: str) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if key := os.environ.get("FLOWAGENT_API_KEY"):
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.url, json.dumps({"input": text}).encode(), headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.load(resp)
        vec = np.asarray(payload["data"][0]["embedding"], dtype=float)
        if vec.shape != (self.dim,):
            raise ValueError(f"remote embedder returned {vec.shape}, expected ({self.dim},)")
        return vec


@dataclass(frozen=True)
class ThresholdRule:
    variable: str
    op: str
    value: float
    unit: str
    directive: str

    def __post_init__(self):
        if self.op not in COMPARATORS:
            raise ValueError(f"comparator must be one of {COMPARATORS}, got {self.op!r}")

    def violated_by(self, observed: float) -> bool:
        return observed > self.value if self.op == ">" else observed < self.value

    def to_dict(self) -> dict:
        return {"variable": self.variable, "op": self.op, "value": self.value,
                "unit": self.unit, "directive": self.directive}


@dataclass(frozen=True)
class KnowledgeChunk:
    id: str
    partition: str
    text: str
    embedding: np.ndarray
    rule: ThresholdRule | None = None
    title: str = ""

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.rule is not None and self.partition != "prot":
            raise ValueError(f"chunk {self.id}: threshold rules are only allowed in the prot partition")
        emb = np.array(self.embedding, dtype=float)
        if emb.ndim != 1 or not np.all(np.isfinite(emb)):
            raise ValueError(f"chunk {self.id}: embedding must be a finite vector")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class RetrievalResult:
    hits: tuple[tuple[str, float], ...]
    query: str = ""

    @property
    def ids(self) -> list[str]:
        return [cid for cid, _ in self.hits]


class KnowledgeStore:
    def __init__(self, dim: int):
        self.dim = dim
        self._chunks: list[KnowledgeChunk] = []
        self._by_id: dict[str, KnowledgeChunk] = {}
        self._matrix: np.ndarray | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._chunks)

    def __iter__(self):
        return iter(list(self._chunks))

    def get(self, chunk_id: str) -> KnowledgeChunk:
        return self._by_id[chunk_id]

    def add(self, chunk: KnowledgeChunk) -> None:
        if chunk.embedding.shape != (self.dim,):
            raise ValueError(f"chunk {chunk.id}: embedding dim {chunk.embedding.shape} != ({self.dim},)")
        with self._lock:
            if chunk.id in self._by_id:
                raise DuplicateChunkError(f"duplicate chunk id {chunk.id!r}")
            self._chunks.append(chunk)
            self._by_id[chunk.id] = chunk
            self._matrix = None

    def rules(self) -> list[tuple[str, ThresholdRule]]:
        return [(c.id, c.rule) for c in self._chunks if c.rule is not None]

    def _embeddings(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = (np.stack([c.embedding for c in self._chunks])
                            if self._chunks else np.zeros((0, self.dim)))
        return self._matrix

    def mips_topk(self, e_q: np.ndarray, k: int, partitions: Iterable[str] | None = None,
                  query: str = "") -> RetrievalResult:
        """Exact top-``k`` by inner product; ties break by ascending chunk id."""
        if k <= 0:
            raise ValueError("k must be positive")
        e_q = np.asarray(e_q, dtype=float)
        if e_q.shape != (self.dim,):
            raise ValueError(f"query dim {e_q.shape} != ({self.dim},)")
        allowed = set(PARTITIONS if partitions is None else partitions)
        unknown = allowed - set(PARTITIONS)
        if unknown:
            raise ValueError(f"unknown partitions {sorted(unknown)}")
        idx = [i for i, c in enumerate(self._chunks) if c.partition in allowed]
        if not idx:
            return RetrievalResult((), query)
        scores = self._embeddings()[idx] @ e_q
        ids = [self._chunks[i].id for i in idx]
        order = sorted(range(len(idx)), key=lambda j: (-scores[j], ids[j]))[:k]
        return RetrievalResult(tuple((ids[j], float(scores[j])) for j in order), query)

    def search(self, text: str, embedder: Embedder, k: int = 3,
               partitions: Iterable[str] | None = None) -> RetrievalResult:
        return self.mips_topk(embedder.embed(text), k, partitions, query=text)

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Embeddings to ``<path>.npy``, everything else to ``<path>.json``."""
        path = Path(path)
        npy, manifest = path.with_suffix(".npy"), path.with_suffix(".json")
        np.save(npy, self._embeddings())
        meta = {
            "dim": self.dim,
            "chunks": [
                {"id": c.id, "partition": c.partition, "title": c.title, "text": c.text,
                 "rule": c.rule.to_dict() if c.rule else None}
                for c in self._chunks
            ],
        }
        manifest.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return npy, manifest

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeStore":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        emb = np.load(path.with_suffix(".npy"))
        store = cls(meta["dim"])
        for row, c in zip(emb, meta["chunks"]):
            rule = ThresholdRule(**c["rule"]) if c["rule"] else None
            store.add(KnowledgeChunk(c["id"], c["partition"], c["text"], row, rule, c.get("title", "")))
        return store


def parse_chunk_file(path: Path) -> tuple[dict, str]:
    """Split optional ``---`` delimited ``key: value`` front-matter from the body."""
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "---":
        return {}, text.strip()
    try:
        end = next(i for i in range(1, len(lines)) if lines[i].strip() == "---")
    except StopIteration:
        raise KnowledgeFormatError(f"{path}: front-matter is not closed with '---'") from None
    meta: dict = {}
    for n, line in enumerate(lines[1:end], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or not key:
            raise KnowledgeFormatError(f"{path}:{n}: expected 'key: value', got {line!r}")
        if key not in FRONT_MATTER_KEYS:
            raise KnowledgeFormatError(f"{path}:{n}: unknown front-matter key {key!r}")
        meta[key] = value.strip()
    return meta, "\n".join(lines[end + 1:]).strip()


def _rule_from_meta(path: Path, meta: dict) -> ThresholdRule | None:
    present = [k for k in RULE_KEYS if k in meta]
    if not present:
        return None
    missing = [k for k in RULE_KEYS if k not in meta]
    if missing:
        raise KnowledgeFormatError(f"{path}: threshold rule is missing keys {missing}")
    try:
        value = float(meta["value"])
    except ValueError:
        raise KnowledgeFormatError(f"{path}: threshold value {meta['value']!r} is not a number") from None
    if meta["op"] not in COMPARATORS:
        raise KnowledgeFormatError(f"{path}: comparator {meta['op']!r} not in {COMPARATORS}")
    return ThresholdRule(meta["variable"], meta["op"], value, meta["unit"], meta["directive"])


def ingest(directory: str | Path, partition: str, embedder: Embedder, store: KnowledgeStore) -> int:
    """Add one chunk per ``*.txt``/``*.md`` file in ``directory`` (sorted by name)."""
    if partition not in PARTITIONS:
        raise ValueError(f"unknown partition {partition!r}")
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix in (".txt", ".md") and p.is_file())
    count = 0
    for path in files:
        meta, body = parse_chunk_file(path)
        rule = _rule_from_meta(path, meta)
        if rule is not None and partition != "prot":
            raise KnowledgeFormatError(f"{path}: threshold rules are only allowed in the prot partition")
        cid = meta.get("id", f"{partition}/{path.stem}")
        title = meta.get("title", "")
        store.add(KnowledgeChunk(cid, partition, body, embedder.embed(f"{title}\n{body}"), rule, title))
        count += 1
    return count


def default_store(embedder: Embedder | None = None, corpus: str | Path | None = None) -> KnowledgeStore:
    """Store populated from a corpus root holding ``phy/``, ``prot/`` and ``hist/``."""
    embedder = embedder or HashingEmbedder()
    root = Path(corpus) if corpus is not None else CORPUS_DIR
    store = KnowledgeStore(embedder.dim)
    for part in PARTITIONS:
        if (root / part).is_dir():
            ingest(root / part, part, embedder, store)
    return store

