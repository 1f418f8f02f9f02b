#!/usr/bin/env python3
"""
Embedding-based schema retrieval: maps a clip's original, unnormalized raw category to the best matching
canonical category and its schema.

The index is a linear scan over the canonical category embeddings (catalogs hold tens of categories).
An exact match under normalization short-circuits to similarity 1.0; otherwise the highest cosine wins and
ties go to the earlier catalog entry. Matches below `min_similarity` are kept but flagged low_confidence.

Usage:
  index, warnings = await build_index(catalog, load_schema_manifest(catalog_dir), gateway)
  match = await retrieve("Historical documentaries", index, gateway)
  match = await resolve("history", catalog, index, gateway)   # catalog mapping first, then retrieval
  persist_index(index, catalog_dir)

"""
__license__ = "MIT - https://mit-license.org/"

import dataclasses
import functools
import json
import logging
import os
import re

import numpy as np

from clipmodel import CanonicalCatalog, normalize_category_name, to_json_document
from gateway import Gateway
from store import write_atomic

log = logging.getLogger(__name__)

MIN_SIMILARITY = 0.30
INDEX_FILE = re.compile(r"^index\.v(\d+)\.json$")


class SchemaIndexError(Exception):
    """Base class for schema index errors."""


class DimensionMismatch(SchemaIndexError):
    pass


class ZeroVector(SchemaIndexError):
    pass


class IndexEmpty(SchemaIndexError):
    pass


def cosine(u, v) -> float:
    """
    Returns dot(u, v) / (|u| |v|), clamped to [-1, 1].

    :raises DimensionMismatch: the vectors differ in shape
    :raises ZeroVector: either vector has zero norm
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"cannot compare vectors of shape {u.shape} and {v.shape}")
    norms = np.linalg.norm(u) * np.linalg.norm(v)
    if norms == 0:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / norms, -1.0, 1.0))


def nearest(query, vectors) -> tuple[int, float]:
    """Index and cosine of the most similar vector; the first one wins ties."""
    best, best_similarity = -1, -np.inf
    for i, vector in enumerate(vectors):
        similarity = cosine(query, vector)
        if similarity > best_similarity:
            best, best_similarity = i, similarity
    if best < 0:
        raise IndexEmpty("no vectors to compare against")
    return best, best_similarity


@dataclasses.dataclass(frozen=True)
class IndexEntry:
    canonical_category: str
    embedding: tuple[float, ...]
    schema_ref: str  # schema file name under the catalog's schemas/ directory


@dataclasses.dataclass(frozen=True)
class SchemaIndex:
    dimension: int
    catalog_version: int
    entries: tuple[IndexEntry, ...]

    def __post_init__(self):
        assert self.dimension > 0, "dimension must be positive"
        names = [normalize_category_name(entry.canonical_category) for entry in self.entries]
        assert len(names) == len(set(names)), "canonical categories repeat in the index"
        for entry in self.entries:
            assert len(entry.embedding) == self.dimension, f"{entry.canonical_category} embedding is not {self.dimension}-dimensional"

    @functools.cached_property
    def vectors(self) -> list[np.ndarray]:
        return [np.asarray(entry.embedding, dtype=np.float64) for entry in self.entries]

    def entry(self, canonical_category: str) -> IndexEntry | None:
        key = normalize_category_name(canonical_category)
        for entry in self.entries:
            if normalize_category_name(entry.canonical_category) == key:
                return entry
        return None

    def to_document(self) -> dict:
        return {
            "dimension": self.dimension,
            "catalog_version": self.catalog_version,
            "entries": [
                {"canonical_category": e.canonical_category, "schema_ref": e.schema_ref, "embedding": list(e.embedding)} for e in self.entries
            ],
        }

    @classmethod
    def from_document(cls, document: dict) -> "SchemaIndex":
        entries = tuple(
            IndexEntry(e["canonical_category"], tuple(float(x) for x in e["embedding"]), e["schema_ref"]) for e in document["entries"]
        )
        return cls(dimension=int(document["dimension"]), catalog_version=int(document["catalog_version"]), entries=entries)


@dataclasses.dataclass(frozen=True)
class Retrieval:
    canonical_category: str
    schema_ref: str
    similarity: float
    low_confidence: bool
    path: str  # catalog | exact | embedding


async def build_index(catalog: CanonicalCatalog, schemas_manifest: dict, gateway: Gateway) -> tuple[SchemaIndex, list[str]]:
    """
    Embeds every canonical category that has a current schema.

    :param schemas_manifest (dict): the schemas manifest, `{"catalog_version": N, "schemas": [{"category", "file", ...}]}`
    - returns (SchemaIndex, [str]): the index and one warning per category left out for lack of a schema
    :raises IndexEmpty: no category can be indexed
    """
    refs = {entry["category"]: entry["file"] for entry in schemas_manifest.get("schemas", [])}
    included = []
    warnings = []
    for category in catalog.canonical_categories:
        if category in refs:
            included.append(category)
        else:
            warnings.append(f"no current schema for '{category}'; left out of the index")
            log.warning(f"⚠ {warnings[-1]}")
    if not included:
        raise IndexEmpty(f"catalog v{catalog.version} has no categories with schemas to index")

    vectors = await gateway.embed(included)
    entries = tuple(IndexEntry(category, tuple(float(x) for x in vector), refs[category]) for category, vector in zip(included, vectors))
    index = SchemaIndex(dimension=len(entries[0].embedding), catalog_version=catalog.version, entries=entries)
    log.info(f"indexed {len(entries)} of {len(catalog.canonical_categories)} canonical categories")
    return index, warnings


async def retrieve(raw_category: str, index: SchemaIndex, gateway: Gateway, min_similarity: float = MIN_SIMILARITY) -> Retrieval:
    """
    Returns the best matching canonical category for a raw category name.

    :raises IndexEmpty: the index has no entries
    """
    if not index.entries:
        raise IndexEmpty("schema index has no entries")
    entry = index.entry(raw_category)
    if entry is not None:
        return Retrieval(entry.canonical_category, entry.schema_ref, 1.0, False, "exact")

    [query] = await gateway.embed([raw_category])
    best, similarity = nearest(query, index.vectors)
    entry = index.entries[best]
    if similarity < min_similarity:
        log.info(f"⚠ '{raw_category}' -> '{entry.canonical_category}' similarity {similarity:.3f} < {min_similarity}")
    return Retrieval(entry.canonical_category, entry.schema_ref, similarity, similarity < min_similarity, "embedding")


async def resolve(
    raw_category: str,
    catalog: CanonicalCatalog | None,
    index: SchemaIndex,
    gateway: Gateway,
    min_similarity: float = MIN_SIMILARITY,
) -> Retrieval:
    """
    Prefers the catalog mapping when the raw name was seen during canonicalization and its target is indexed;
    the reported similarity is then the cosine between the raw name and the mapped category.
    Unseen raw names (or no catalog) go through `retrieve()`.
    """
    mapped = catalog.lookup(raw_category) if catalog is not None else None
    entry = index.entry(mapped) if mapped is not None else None
    if entry is None:
        return await retrieve(raw_category, index, gateway, min_similarity)
    if normalize_category_name(raw_category) == normalize_category_name(entry.canonical_category):
        similarity = 1.0
    elif not normalize_category_name(raw_category):
        similarity = 0.0
    else:
        [query] = await gateway.embed([raw_category])
        similarity = cosine(query, entry.embedding)
    return Retrieval(entry.canonical_category, entry.schema_ref, similarity, False, "catalog")


def index_path(directory: str, catalog_version: int) -> str:
    return os.path.join(directory, f"index.v{catalog_version}.json")


def persist_index(index: SchemaIndex, directory: str) -> str:
    """Writes `index.v{catalog_version}.json` with full precision embeddings."""
    return write_atomic(index_path(directory, index.catalog_version), to_json_document(index.to_document()))


def load_index(directory: str, catalog_version: int = None) -> SchemaIndex | None:
    """Loads the index for a catalog version (default: the highest on disk), or None if there is none."""
    if catalog_version is None:
        versions = [int(m.group(1)) for m in map(INDEX_FILE.match, os.listdir(directory) if os.path.isdir(directory) else []) if m]
        if not versions:
            return None
        catalog_version = max(versions)
    path = index_path(directory, catalog_version)
    if not os.path.exists(path):
        return None
    with open(path, mode="r", encoding="utf-8") as fh:
        return SchemaIndex.from_document(json.load(fh))
