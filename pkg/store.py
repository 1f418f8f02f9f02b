#!/usr/bin/env python3
"""
Append-only JSONL record streams with derived inverted indexes.

Layout under the store root:
  streams/{stream}.jsonl   one record per line, UTF-8, LF line endings
  indexes/{key}.json       key value -> sorted line offsets into streams/entities.jsonl
  locks/{stream}.lock      present while a writer holds the stream
  catalog/                 catalog, schema and schema index files (see schemagen, schemaindex)

Streams are the source of truth; index files are always rebuildable from them.
There is one writer per stream (enforced by the lock file) and any number of readers.

Usage:
  store = RecordStore("run")
  offset = store.append("failures-extract", failure)
  with store.writer("entities") as writer:
      writer.append(record)
  for record in store.scan("entities", lambda r: r.canonical_category == "History"):
      print(record.clip_id)
  store.build_inverted_index("entity_type")

"""
__license__ = "MIT - https://mit-license.org/"

import contextlib
import json
import logging
import os
import tempfile
from typing import Callable, Iterator

from pydantic import BaseModel, ValidationError

from clipmodel import (
    ClipManifestEntry,
    DropRecord,
    EntityRecord,
    FailureRecord,
    RawCategorization,
    normalize_category_name,
    normalize_entity_value,
    to_json_document,
    to_json_line,
)

log = logging.getLogger(__name__)

STREAMS = {
    # name : record type
    "manifest": ClipManifestEntry,
    "categorization": RawCategorization,
    "categorization-extra": RawCategorization,
    "entities": EntityRecord,
    "drops": DropRecord,
    "failures-categorize": FailureRecord,
    "failures-genschema": FailureRecord,
    "failures-extract": FailureRecord,
}
INDEX_KEYS = ("canonical_category", "entity_type", "attribute_value_normalized")


class StoreError(Exception):
    """Base class for record store errors."""


class UnknownStream(StoreError):
    pass


class MissingStream(StoreError):
    pass


class CorruptLine(StoreError):
    """A stream line does not parse as the stream's record type. `offset` is the 0-based line number."""

    def __init__(self, stream: str, offset: int, message: str):
        super().__init__(f"{stream} line {offset}: {message}")
        self.stream = stream
        self.offset = offset


class StoreLocked(StoreError):
    pass


def write_atomic(path: str, text: str) -> str:
    """Writes text to path via a temporary file in the same directory and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode="w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.remove(tmp_path)
        raise
    return path


class StreamWriter:
    """
    Exclusive appender for one stream. Holds `locks/{stream}.lock` from `open()` until `close()`.
    Every append is flushed and fsynced before it returns when the store is durable.
    """

    def __init__(self, store: "RecordStore", stream: str):
        self.store = store
        self.stream = stream
        self.record_type = store.record_type(stream)
        self.path = store.stream_path(stream)
        self.fh = None
        self.offset = 0  # offset of the next line

    def open(self) -> "StreamWriter":
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        self.store.acquire_lock(self.stream)
        try:
            self.offset = self.store.line_count(self.stream, check_tail=True)
            self.fh = open(self.path, mode="a", encoding="utf-8", newline="\n")
        except BaseException:
            self.store.release_lock(self.stream)
            raise
        return self

    def append(self, record: BaseModel) -> int:
        """Appends one record and returns its 0-based line offset."""
        if not isinstance(record, self.record_type):
            raise TypeError(f"{self.stream} holds {self.record_type.__name__}, not {type(record).__name__}")
        self.fh.write(to_json_line(record) + "\n")
        if self.store.durable:
            self.sync()
        offset = self.offset
        self.offset += 1
        return offset

    def sync(self) -> None:
        self.fh.flush()
        os.fsync(self.fh.fileno())

    def close(self) -> None:
        if self.fh is not None:
            self.sync()
            self.fh.close()
            self.fh = None
        self.store.release_lock(self.stream)

    def __enter__(self) -> "StreamWriter":
        return self.open()

    def __exit__(self, *exc) -> None:
        self.close()


class RecordStore:

    def __init__(self, root: str, durable: bool = True):
        """
        root (str): the store root directory; created on first write
        durable (bool): fsync every append before returning
        """
        assert root, "root is empty"
        self.root = root
        self.durable = durable
        self.streams_dir = os.path.join(root, "streams")
        self.indexes_dir = os.path.join(root, "indexes")
        self.locks_dir = os.path.join(root, "locks")
        self.catalog_dir = os.path.join(root, "catalog")

    def record_type(self, stream: str) -> type[BaseModel]:
        if stream not in STREAMS:
            raise UnknownStream(f"unknown stream '{stream}'; expected one of {', '.join(STREAMS)}")
        return STREAMS[stream]

    def stream_path(self, stream: str) -> str:
        self.record_type(stream)
        return os.path.join(self.streams_dir, f"{stream}.jsonl")

    def lock_path(self, stream: str) -> str:
        return os.path.join(self.locks_dir, f"{stream}.lock")

    def index_path(self, key: str) -> str:
        if key not in INDEX_KEYS:
            raise StoreError(f"unknown index key '{key}'; expected one of {', '.join(INDEX_KEYS)}")
        return os.path.join(self.indexes_dir, f"{key}.json")

    def exists(self, stream: str) -> bool:
        return os.path.isfile(self.stream_path(stream))

    def is_locked(self, stream: str) -> bool:
        return os.path.exists(self.lock_path(stream))

    def acquire_lock(self, stream: str) -> str:
        """
        Creates `locks/{stream}.lock` holding this process id.

        :raises StoreLocked: the lock file already exists
        """
        path = self.lock_path(stream)
        os.makedirs(self.locks_dir, exist_ok=True)
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            raise StoreLocked(f"{stream} is locked by {path}; remove it if no writer is running") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return path

    def release_lock(self, stream: str) -> None:
        with contextlib.suppress(FileNotFoundError):
            os.remove(self.lock_path(stream))

    @contextlib.contextmanager
    def locked(self, stream: str) -> Iterator[str]:
        """Holds the stream lock for the duration of the block."""
        path = self.acquire_lock(stream)
        try:
            yield path
        finally:
            self.release_lock(stream)

    def line_count(self, stream: str, check_tail: bool = False) -> int:
        """Number of lines in the stream (0 if it does not exist). A torn last line is CorruptLine."""
        path = self.stream_path(stream)
        if not os.path.exists(path):
            return 0
        count = 0
        last = b"\n"
        with open(path, mode="rb") as fh:
            for line in fh:
                count += 1
                last = line[-1:]
        if check_tail and last != b"\n":
            raise CorruptLine(stream, count - 1, "last line is incomplete (interrupted write)")
        return count

    def writer(self, stream: str) -> StreamWriter:
        return StreamWriter(self, stream)

    def append(self, stream: str, record: BaseModel) -> int:
        """Appends one record under the stream lock and returns its 0-based line offset."""
        with self.writer(stream) as writer:
            return writer.append(record)

    def scan_with_offsets(self, stream: str, predicate: Callable = None) -> Iterator[tuple[int, BaseModel]]:
        record_type = self.record_type(stream)
        path = self.stream_path(stream)
        if not os.path.exists(path):
            raise MissingStream(f"{path} does not exist")
        with open(path, mode="r", encoding="utf-8", newline="\n") as fh:
            for offset, line in enumerate(fh):
                text = line.rstrip("\n")
                if not text.strip():
                    raise CorruptLine(stream, offset, "blank line")
                try:
                    record = record_type.model_validate_json(text)
                except ValidationError as e:
                    raise CorruptLine(stream, offset, e.errors()[0]["msg"]) from e
                if predicate is None or predicate(record):
                    yield offset, record

    def scan(self, stream: str, predicate: Callable = None) -> Iterator[BaseModel]:
        """
        Yields the stream's records in append order, optionally filtered by `predicate(record)`.

        :raises MissingStream: the stream has never been written
        :raises CorruptLine: a line does not parse; the exception carries its 0-based offset
        """
        for _, record in self.scan_with_offsets(stream, predicate):
            yield record

    def read(self, stream: str, predicate: Callable = None) -> list[BaseModel]:
        return list(self.scan(stream, predicate))

    def verify(self, stream: str) -> int:
        """Parses every line of the stream and returns the record count."""
        return sum(1 for _ in self.scan_with_offsets(stream))

    def reset(self, stream: str) -> None:
        """Empties a stream (for --overwrite re-runs). Indexes derived from entities are removed with it."""
        if self.is_locked(stream):
            raise StoreLocked(f"{stream} is locked by {self.lock_path(stream)}")
        path = self.stream_path(stream)
        if os.path.exists(path):
            open(path, mode="w").close()
            log.info(f"reset {path}")
        if stream == "entities":
            for key in INDEX_KEYS:
                with contextlib.suppress(FileNotFoundError):
                    os.remove(self.index_path(key))

    @staticmethod
    def index_values(record: EntityRecord, key: str) -> set[str]:
        """The normalized index keys one entity record is filed under."""
        if key == "canonical_category":
            values = {normalize_category_name(record.canonical_category)}
        elif key == "entity_type":
            values = {normalize_category_name(entity.entity_type) for entity in record.entities}
        elif key == "attribute_value_normalized":
            values = {normalize_entity_value(a.value) for entity in record.entities for a in entity.attributes}
        else:
            raise StoreError(f"unknown index key '{key}'")
        values.discard("")
        return values

    def build_inverted_index(self, key: str) -> str:
        """
        Rebuilds `indexes/{key}.json` from the entities stream: normalized key value -> sorted line offsets.
        The output is byte-identical for the same stream. The entities lock is held until the index is written.

        :raises StoreLocked: a writer currently holds the entities stream
        """
        path = self.index_path(key)
        index = {}
        with self.locked("entities"):
            for offset, record in self.scan_with_offsets("entities"):
                for value in self.index_values(record, key):
                    index.setdefault(value, []).append(offset)
            document = {value: sorted(index[value]) for value in sorted(index)}
            write_atomic(path, to_json_document(document))
        log.info(f"{path}: {len(document)} keys")
        return path

    def load_index(self, key: str) -> dict[str, list[int]]:
        path = self.index_path(key)
        if not os.path.exists(path):
            raise MissingStream(f"{path} does not exist; build the index first")
        with open(path, mode="r", encoding="utf-8") as fh:
            return json.load(fh)

    def lookup(self, key: str, value: str) -> list[EntityRecord]:
        """Returns the entity records filed under a key value (normalized before lookup)."""
        wanted = normalize_entity_value(value)
        offsets = set(self.load_index(key).get(wanted, []))
        if not offsets:
            return []
        return [record for offset, record in self.scan_with_offsets("entities") if offset in offsets]
