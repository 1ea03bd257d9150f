"""Bit-exact on-disk cache of per-frame embeddings.

Encoding 62 hours of video through a transformer is the expensive step of the
pipeline, so embeddings are computed once and persisted keyed by
(session, view, frame_index).

Layout: a store is a directory holding one binary data file per
(session, view) plus a JSON index. Splitting by (session, view) lets parallel
encoders write without contention (one writer per file) and keeps session
scans sequential.

index.json: {"format_version", "embed_dim", "sessions": [...string table...],
             "files": [{"session_ref", "view_id", "path", "count"}]}
It is rewritten atomically (temp file + rename) on every flush.

Data file, all little-endian:
  header (14 bytes): magic "SRLF" | version u16 | embed_dim u32 | record_count u32
  record (21 + 4*embed_dim bytes):
      key_hash u64      blake2b-64 of "session/view/frame"
      session_ref u32   index into the index's session table
      view_id u8
      frame_index u32
      values            embed_dim * float32
      crc u32           CRC32 over all preceding record bytes

Fixed-size records give O(1) seeks; the per-record CRC detects corruption and
the header count pinned against the file size detects truncation.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    DuplicateKeyError,
    IntegrityError,
    StoreError,
    ValidationError,
)

MAGIC = b"SRLF"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHII")
REC_FIXED = struct.Struct("<QIBI")
NUM_VIEWS = 3


@dataclass(frozen=True)
class EmbeddingKey:
    session: str
    view_id: int
    frame_index: int

    def __post_init__(self):
        if not 0 <= self.view_id < NUM_VIEWS:
            raise ValidationError(f"view_id {self.view_id} outside [0, {NUM_VIEWS})")
        if self.frame_index < 0:
            raise ValidationError("frame_index must be non-negative")
        if not self.session:
            raise ValidationError("session key must be non-empty")

    def hash64(self) -> int:
        digest = hashlib.blake2b(
            f"{self.session}/{self.view_id}/{self.frame_index}".encode(),
            digest_size=8).digest()
        return int.from_bytes(digest, "little")


@dataclass
class ScanResult:
    """Frames with all views present, plus the ones that are missing a view."""

    triplets: list[tuple[int, np.ndarray]]   # (frame_index, (NUM_VIEWS, dim))
    incomplete: list[int]


class _DataFile:
    def __init__(self, path: Path, embed_dim: int, session_ref: int, view_id: int):
        self.path = path
        self.embed_dim = embed_dim
        self.session_ref = session_ref
        self.view_id = view_id
        self.record_size = REC_FIXED.size + 4 * embed_dim + 4
        self.frames: dict[int, int] = {}     # frame_index -> record offset
        self._fh = None
        self._dirty = False

    def open_existing(self, expected_count: int) -> None:
        size = self.path.stat().st_size
        expected_size = HEADER.size + expected_count * self.record_size
        with open(self.path, "rb") as f:
            head = f.read(HEADER.size)
            if len(head) < HEADER.size:
                raise IntegrityError(f"{self.path}: truncated header")
            magic, version, dim, count = HEADER.unpack(head)
            if magic != MAGIC:
                raise IntegrityError(f"{self.path}: bad magic {magic!r}")
            if version != FORMAT_VERSION:
                raise IntegrityError(f"{self.path}: unsupported version {version}")
            if dim != self.embed_dim:
                raise IntegrityError(
                    f"{self.path}: embed_dim {dim} != store embed_dim {self.embed_dim}")
            if count != expected_count or size != expected_size:
                raise IntegrityError(
                    f"{self.path}: size {size} / count {count} inconsistent with "
                    f"index count {expected_count}")
            offset = HEADER.size
            for _ in range(count):
                fixed = f.read(REC_FIXED.size)
                _, _, _, frame = REC_FIXED.unpack(fixed)
                self.frames[frame] = offset
                f.seek(4 * self.embed_dim + 4, os.SEEK_CUR)
                offset += self.record_size

    def create(self) -> None:
        with open(self.path, "wb") as f:
            f.write(HEADER.pack(MAGIC, FORMAT_VERSION, self.embed_dim, 0))

    def _handle(self):
        if self._fh is None:
            self._fh = open(self.path, "r+b")
        return self._fh

    def append(self, key: EmbeddingKey, vec: np.ndarray) -> None:
        fh = self._handle()
        fh.seek(0, os.SEEK_END)
        offset = fh.tell()
        body = REC_FIXED.pack(key.hash64(), self.session_ref, key.view_id,
                              key.frame_index)
        body += np.ascontiguousarray(vec, dtype="<f4").tobytes()
        crc = zlib.crc32(body) & 0xFFFFFFFF
        fh.write(body + struct.pack("<I", crc))
        self.frames[key.frame_index] = offset
        self._dirty = True

    def read(self, frame_index: int) -> np.ndarray:
        offset = self.frames[frame_index]
        fh = self._handle()
        if self._dirty:
            fh.flush()  # make buffered appends visible to pread
        # pread keeps the file position untouched, so concurrent readers
        # cannot interleave each other's seeks.
        raw = os.pread(fh.fileno(), self.record_size, offset)
        if len(raw) < self.record_size:
            raise IntegrityError(f"{self.path}: record at {offset} truncated")
        body, crc_raw = raw[:-4], raw[-4:]
        (crc_stored,) = struct.unpack("<I", crc_raw)
        if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
            raise IntegrityError(
                f"{self.path}: CRC mismatch for frame {frame_index}")
        key_hash, session_ref, view_id, frame = REC_FIXED.unpack_from(body, 0)
        if frame != frame_index or view_id != self.view_id \
                or session_ref != self.session_ref:
            raise IntegrityError(
                f"{self.path}: record at {offset} does not match its index entry")
        return np.frombuffer(body, dtype="<f4", count=self.embed_dim,
                             offset=REC_FIXED.size).copy()

    def flush(self) -> None:
        if self._fh is not None and self._dirty:
            self._fh.seek(0)
            self._fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, self.embed_dim,
                                       len(self.frames)))
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._dirty = False

    def close(self) -> None:
        self.flush()
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class EmbeddingStore:
    """Directory-backed embedding cache. Many readers, one writer per file."""

    def __init__(self, root: Path, embed_dim: int, sessions: list[str],
                 files: dict[tuple[int, int], _DataFile]):
        self.root = root
        self.embed_dim = embed_dim
        self._sessions = sessions
        self._session_refs = {s: i for i, s in enumerate(sessions)}
        self._files = files

    # -------------------------------------------------- construction

    @classmethod
    def create(cls, root, embed_dim: int) -> "EmbeddingStore":
        root = Path(root)
        if root.exists() and any(root.iterdir()):
            raise StoreError(f"refusing to create a store in non-empty {root}")
        root.mkdir(parents=True, exist_ok=True)
        store = cls(root, embed_dim, [], {})
        store._write_index()
        return store

    @classmethod
    def open(cls, root) -> "EmbeddingStore":
        root = Path(root)
        index_path = root / "index.json"
        if not index_path.exists():
            raise StoreError(f"no embedding store at {root} (missing index.json)")
        with open(index_path, encoding="utf-8") as f:
            index = json.load(f)
        if index.get("format_version") != FORMAT_VERSION:
            raise IntegrityError(
                f"unsupported store format version {index.get('format_version')}")
        embed_dim = index["embed_dim"]
        sessions = list(index["sessions"])
        files = {}
        for entry in index["files"]:
            df = _DataFile(root / entry["path"], embed_dim,
                           entry["session_ref"], entry["view_id"])
            if not df.path.exists():
                raise IntegrityError(f"{df.path}: listed in index but missing")
            df.open_existing(entry["count"])
            files[(entry["session_ref"], entry["view_id"])] = df
        return cls(root, embed_dim, sessions, files)

    # -------------------------------------------------- index handling

    def _write_index(self) -> None:
        index = {
            "format_version": FORMAT_VERSION,
            "embed_dim": self.embed_dim,
            "sessions": self._sessions,
            "files": [
                {"session_ref": ref, "view_id": view,
                 "path": df.path.name, "count": len(df.frames)}
                for (ref, view), df in sorted(self._files.items())
            ],
        }
        tmp = self.root / "index.json.tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(index, f, indent=1, sort_keys=True)
        os.replace(tmp, self.root / "index.json")

    def _session_ref(self, session: str, create: bool) -> int | None:
        ref = self._session_refs.get(session)
        if ref is None and create:
            ref = len(self._sessions)
            self._sessions.append(session)
            self._session_refs[session] = ref
        return ref

    def _file_for(self, session: str, view_id: int, create: bool) -> _DataFile | None:
        ref = self._session_ref(session, create)
        if ref is None:
            return None
        df = self._files.get((ref, view_id))
        if df is None and create:
            df = _DataFile(self.root / f"{ref:06d}_v{view_id}.emb",
                           self.embed_dim, ref, view_id)
            df.create()
            self._files[(ref, view_id)] = df
        return df

    # -------------------------------------------------- operations

    def put(self, key: EmbeddingKey, vec) -> None:
        vec = np.asarray(vec)
        if vec.shape != (self.embed_dim,):
            raise DimensionMismatchError(
                f"vector of shape {vec.shape} into a {self.embed_dim}-dim store")
        if not np.all(np.isfinite(vec)):
            raise ValidationError("refusing to store non-finite embedding values")
        df = self._file_for(key.session, key.view_id, create=True)
        if key.frame_index in df.frames:
            raise DuplicateKeyError(
                f"key {key.session}/{key.view_id}/{key.frame_index} already stored")
        df.append(key, vec.astype("<f4", copy=False))

    def get(self, key: EmbeddingKey) -> np.ndarray | None:
        df = self._file_for(key.session, key.view_id, create=False)
        if df is None or key.frame_index not in df.frames:
            return None
        return df.read(key.frame_index)

    def contains(self, key: EmbeddingKey) -> bool:
        df = self._file_for(key.session, key.view_id, create=False)
        return df is not None and key.frame_index in df.frames

    def scan_session(self, session: str) -> ScanResult:
        ref = self._session_refs.get(session)
        if ref is None:
            return ScanResult([], [])
        per_view = []
        for view in range(NUM_VIEWS):
            df = self._files.get((ref, view))
            per_view.append(df.frames if df is not None else {})
        complete = set(per_view[0])
        for frames in per_view[1:]:
            complete &= set(frames)
        all_frames = set()
        for frames in per_view:
            all_frames |= set(frames)
        triplets = []
        for frame in sorted(complete):
            mat = np.stack([self._files[(ref, v)].read(frame)
                            for v in range(NUM_VIEWS)])
            triplets.append((frame, mat))
        return ScanResult(triplets, sorted(all_frames - complete))

    def sessions(self) -> list[str]:
        return list(self._sessions)

    def record_count(self) -> int:
        return sum(len(df.frames) for df in self._files.values())

    def flush(self) -> None:
        for df in self._files.values():
            df.flush()
        self._write_index()

    def close(self) -> None:
        for df in self._files.values():
            df.close()
        self._write_index()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
