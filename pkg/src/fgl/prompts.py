"""Client-side prompt generation, server-side prompt aggregation, wire format.

Class-level prompts carry a class descriptor and the client's sample count
for that class. Entity-level prompts additionally carry per-class k-means
sufficient statistics (count, mean, diagonal variance per cluster), which is
what a server-side generator needs to reproduce the client's sample content.

Wire format (little-endian)::

    header  : b"FGLP" | version u16 | mode u8 | prompt count u32      (11 bytes)
    class   : class id u16 | count u32 | descriptor len u16 | utf-8 bytes
    entity  : <class record> | cluster count u16 |
              per cluster: count u32 | dim u16 | mean f32*dim | var f32*dim

Cluster statistics are f32 on the wire, so they round-trip only to f32
precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from .datasets import ClientShard, LabeledDataset
from .seeding import derive_rng

MAGIC = b"FGLP"
VERSION = 1
CLASS_LEVEL, ENTITY_LEVEL = "class", "entity"
_MODE_CODES = {CLASS_LEVEL: 0, ENTITY_LEVEL: 1}
_HEADER = struct.Struct("<4sHBI")
HEADER_BYTES = _HEADER.size
KMEANS_ITERS = 25


@dataclass(frozen=True)
class ClassLevelPrompt:
    class_id: int
    descriptor: str
    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("prompt count must be positive")


@dataclass(frozen=True)
class ClusterStat:
    count: int
    mean: np.ndarray
    var: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, ClusterStat) and self.count == other.count
                and np.array_equal(self.mean, other.mean) and np.array_equal(self.var, other.var))


@dataclass(frozen=True)
class EntityLevelPrompt:
    class_id: int
    descriptor: str
    clusters: tuple[ClusterStat, ...]

    @property
    def count(self) -> int:
        return sum(c.count for c in self.clusters)


Prompt = Union[ClassLevelPrompt, EntityLevelPrompt]


@dataclass
class PromptSet:
    mode: str
    prompts: list
    client_id: Optional[int] = None
    nbytes: Optional[int] = None

    def __post_init__(self):
        if self.mode not in _MODE_CODES:
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        kind = ClassLevelPrompt if self.mode == CLASS_LEVEL else EntityLevelPrompt
        if any(not isinstance(p, kind) for p in self.prompts):
            raise ValueError(f"prompt set mixes record types for mode {self.mode!r}")

    def class_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for p in self.prompts:
            out[p.class_id] = out.get(p.class_id, 0) + p.count
        return out


def gen_class_prompts(shard: ClientShard, data: LabeledDataset) -> PromptSet:
    labels = data.labels[shard.indices]
    hist = np.bincount(labels, minlength=data.num_classes)
    prompts = [ClassLevelPrompt(int(c), data.class_names[c], int(hist[c]))
               for c in np.flatnonzero(hist)]
    return PromptSet(CLASS_LEVEL, prompts, client_id=shard.client_id)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = KMEANS_ITERS) -> np.ndarray:
    """Cluster assignments from Lloyd's algorithm with k-means++ seeding."""
    n = x.shape[0]
    k = min(k, n)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        pick = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = x[pick]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    assign = np.zeros(n, dtype=np.int64)
    for it in range(iters):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if it > 0 and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = x[assign == j]
            if members.size:
                centers[j] = members.mean(axis=0)
    return assign


def gen_entity_prompts(shard: ClientShard, data: LabeledDataset, clusters_per_class: int,
                       seed: int = 0) -> PromptSet:
    if clusters_per_class < 1:
        raise ValueError("clusters_per_class must be >= 1")
    rng = derive_rng(seed, "entity", shard.client_id)
    feats = data.features[shard.indices].reshape(shard.n, -1)
    labels = data.labels[shard.indices]
    prompts = []
    for c in np.unique(labels):
        x = feats[labels == c]
        assign = kmeans(x, clusters_per_class, rng) if clusters_per_class > 1 \
            else np.zeros(x.shape[0], dtype=np.int64)
        stats = []
        for j in range(int(assign.max()) + 1):
            members = x[assign == j]
            if members.shape[0]:
                stats.append(ClusterStat(members.shape[0], members.mean(axis=0), members.var(axis=0)))
        prompts.append(EntityLevelPrompt(int(c), data.class_names[c], tuple(stats)))
    return PromptSet(ENTITY_LEVEL, prompts, client_id=shard.client_id)


def aggregate_prompts(sets: Sequence[PromptSet]) -> PromptSet:
    """Merge client prompt sets; output is sorted by class id and anonymous."""
    if not sets:
        raise ValueError("no prompt sets to aggregate")
    modes = {s.mode for s in sets}
    if len(modes) != 1:
        raise ValueError(f"cannot aggregate mixed prompt modes {sorted(modes)}")
    mode = modes.pop()
    names: dict[int, str] = {}
    if mode == CLASS_LEVEL:
        counts: dict[int, int] = {}
        for s in sets:
            for p in s.prompts:
                names.setdefault(p.class_id, p.descriptor)
                counts[p.class_id] = counts.get(p.class_id, 0) + p.count
        merged = [ClassLevelPrompt(c, names[c], counts[c]) for c in sorted(counts)]
    else:
        clusters: dict[int, list] = {}
        for s in sets:
            for p in s.prompts:
                names.setdefault(p.class_id, p.descriptor)
                clusters.setdefault(p.class_id, []).extend(p.clusters)
        merged = [EntityLevelPrompt(c, names[c], tuple(clusters[c])) for c in sorted(clusters)]
    return PromptSet(mode, merged)


def serialize_prompts(ps: PromptSet) -> bytes:
    """Encode to the wire format; records the byte length on ``ps``."""
    parts = [_HEADER.pack(MAGIC, VERSION, _MODE_CODES[ps.mode], len(ps.prompts))]
    for p in ps.prompts:
        text = p.descriptor.encode("utf-8")
        parts.append(struct.pack("<HIH", p.class_id, p.count, len(text)))
        parts.append(text)
        if ps.mode == ENTITY_LEVEL:
            parts.append(struct.pack("<H", len(p.clusters)))
            for cl in p.clusters:
                mean = np.asarray(cl.mean, dtype="<f4")
                var = np.asarray(cl.var, dtype="<f4")
                parts.append(struct.pack("<IH", cl.count, mean.size))
                parts.append(mean.tobytes())
                parts.append(var.tobytes())
    payload = b"".join(parts)
    ps.nbytes = len(payload)
    return payload


def deserialize_prompts(payload: bytes) -> PromptSet:
    if len(payload) < HEADER_BYTES:
        raise ValueError(f"prompt payload truncated at byte offset {len(payload)}")
    magic, version, code, count = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise ValueError(f"bad prompt magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise ValueError(f"unsupported prompt format version {version}")
    mode = {v: k for k, v in _MODE_CODES.items()}.get(code)
    if mode is None:
        raise ValueError(f"unknown prompt mode code {code} at byte offset 6")
    pos = HEADER_BYTES
    prompts = []
    try:
        for _ in range(count):
            cid, n, tlen = struct.unpack_from("<HIH", payload, pos)
            pos += 8
            text = payload[pos:pos + tlen].decode("utf-8")
            pos += tlen
            if mode == CLASS_LEVEL:
                prompts.append(ClassLevelPrompt(cid, text, n))
                continue
            (ncl,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            stats = []
            for _ in range(ncl):
                ccount, dim = struct.unpack_from("<IH", payload, pos)
                pos += 6
                mean = np.frombuffer(payload, "<f4", dim, pos).astype(np.float64)
                pos += 4 * dim
                var = np.frombuffer(payload, "<f4", dim, pos).astype(np.float64)
                pos += 4 * dim
                stats.append(ClusterStat(ccount, mean, var))
            prompts.append(EntityLevelPrompt(cid, text, tuple(stats)))
    except (struct.error, ValueError) as exc:
        raise ValueError(f"prompt payload malformed near byte offset {pos}: {exc}") from None
    if pos != len(payload):
        raise ValueError(f"{len(payload) - pos} trailing bytes after byte offset {pos}")
    return PromptSet(mode, prompts, nbytes=len(payload))


def strip_client(ps: PromptSet) -> PromptSet:
    return replace(ps, client_id=None)
