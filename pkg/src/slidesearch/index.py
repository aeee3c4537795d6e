"""Binary code index and exact Hamming-distance retrieval.

Codes pack one bit per component: +1 -> 1, -1 -> 0, component i at bit
position i, little-endian. Queries are an exact linear scan (XOR and
popcount over packed 64-bit words) ranked by ascending distance with ties
broken by ascending graph id.

Index file format (little-endian, extension ``.ghix``):

    magic  b"GHIX", u32 version, u32 code_bits, u64 n_entries
    entry  u32 id length + utf-8 bytes, u8 label, ceil(code_bits/8) code bytes
    crc32  u32 over all preceding bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graphs import GraphLabel
from .model import GcnHashParams, binarize, encode_graph

INDEX_MAGIC = b"GHIX"
INDEX_VERSION = 1


def pack_code(signs: np.ndarray) -> np.ndarray:
    """Pack a +-1 vector into bytes (bit i = 1 iff component i is +1)."""
    signs = np.asarray(signs)
    return np.packbits(signs > 0, bitorder="little")


def unpack_code(code: np.ndarray, code_bits: int) -> np.ndarray:
    """Inverse of pack_code; returns int8 in {-1, +1}."""
    bits = np.unpackbits(np.asarray(code, dtype=np.uint8), bitorder="little")[:code_bits]
    return np.where(bits > 0, 1, -1).astype(np.int8)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Number of differing bits between two packed codes of equal width."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise DataError(f"hamming: width mismatch {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a ^ b).sum())


@dataclass(frozen=True)
class IndexEntry:
    graph_id: str
    wsi_id: str
    label: GraphLabel
    code: np.ndarray  # packed uint8


@dataclass(frozen=True)
class RankedItem:
    graph_id: str
    distance: int
    label: GraphLabel


@dataclass
class RetrievalResult:
    query_id: str
    ranked: list


class BinaryCodeIndex:
    """Immutable collection of packed codes with metadata, scan-ready."""

    def __init__(self, code_bits: int, entries: list):
        if code_bits < 1:
            raise DataError(f"index: code_bits must be >= 1, got {code_bits}")
        n_bytes = (code_bits + 7) // 8
        seen = set()
        for e in entries:
            if e.graph_id in seen:
                raise DataError(f"index: duplicate graph id {e.graph_id!r}")
            seen.add(e.graph_id)
            if e.code.shape != (n_bytes,):
                raise DataError(f"index: entry {e.graph_id!r} code is not {code_bits} bits")
        self.code_bits = code_bits
        self.entries = list(entries)
        self._ids = np.asarray([e.graph_id for e in entries])
        # Pad packed bytes to whole 64-bit words for the vectorized scan.
        n_words = max(1, (n_bytes + 7) // 8)
        padded = np.zeros((len(entries), n_words * 8), dtype=np.uint8)
        for i, e in enumerate(entries):
            padded[i, :n_bytes] = e.code
        self._words = padded.view("<u8")
        # Rank of each entry's id in lexicographic order: the tie-break key.
        self._id_rank = np.empty(len(entries), dtype=np.int64)
        self._id_rank[np.argsort(self._ids, kind="stable")] = np.arange(len(entries))

    def __len__(self) -> int:
        return len(self.entries)

    def _query_words(self, code: np.ndarray) -> np.ndarray:
        n_bytes = (self.code_bits + 7) // 8
        code = np.asarray(code, dtype=np.uint8)
        if code.shape != (n_bytes,):
            raise DataError(f"query: code is not {self.code_bits} bits")
        padded = np.zeros(self._words.shape[1] * 8, dtype=np.uint8)
        padded[:n_bytes] = code
        return padded.view("<u8")

    def distances(self, code: np.ndarray) -> np.ndarray:
        """Hamming distance from ``code`` to every entry (the scan)."""
        if not self.entries:
            raise DataError("query: empty index")
        return np.bitwise_count(self._words ^ self._query_words(code)).sum(axis=1).astype(np.int64)


def build_index(graphs, params: GcnHashParams) -> BinaryCodeIndex:
    """Encode and binarize every non-excluded graph (inference mode)."""
    entries = []
    for g in graphs:
        if g.label == GraphLabel.EXCLUDED:
            continue
        y, _ = encode_graph(g, params)
        entries.append(
            IndexEntry(graph_id=g.graph_id, wsi_id=g.wsi_id, label=g.label, code=pack_code(binarize(y)))
        )
    return BinaryCodeIndex(code_bits=params.dims.code_bits, entries=entries)


def query(index: BinaryCodeIndex, code: np.ndarray, k: int, query_id: str = "") -> RetrievalResult:
    """Exact top-k by ascending Hamming distance, ties by ascending graph id.

    ``k`` is clamped to the index size.
    """
    if k < 1:
        raise DataError(f"query: k must be >= 1, got {k}")
    dists = index.distances(code)
    n = len(index)
    k = min(k, n)
    # Single sortable key: distance majors, id rank minors.
    combined = dists * np.int64(n) + index._id_rank
    top = np.argpartition(combined, k - 1)[:k]
    top = top[np.argsort(combined[top])]
    ranked = [
        RankedItem(graph_id=index.entries[i].graph_id, distance=int(dists[i]), label=index.entries[i].label)
        for i in top
    ]
    return RetrievalResult(query_id=query_id, ranked=ranked)


def save_index(index: BinaryCodeIndex, path) -> None:
    out = bytearray()
    out += INDEX_MAGIC
    out += struct.pack("<IIQ", INDEX_VERSION, index.code_bits, len(index.entries))
    for e in index.entries:
        gid = e.graph_id.encode("utf-8")
        out += struct.pack("<I", len(gid)) + gid
        out += struct.pack("<B", e.label.value)
        out += e.code.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def load_index(path) -> BinaryCodeIndex:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 + 16 + 4:
        raise DataError(f"{path}: file too short for an index")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DataError(f"{path}: checksum mismatch")
    if body[:4] != INDEX_MAGIC:
        raise DataError(f"{path}: bad magic")
    version, code_bits, count = struct.unpack_from("<IIQ", body, 4)
    if version != INDEX_VERSION:
        raise DataError(f"{path}: unsupported index version {version}")
    n_bytes = (code_bits + 7) // 8
    pos = 4 + 16
    entries = []
    for _ in range(count):
        if pos + 4 > len(body):
            raise DataError(f"{path}: truncated entry header")
        (id_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        if pos + id_len + 1 + n_bytes > len(body):
            raise DataError(f"{path}: truncated entry")
        graph_id = body[pos : pos + id_len].decode("utf-8")
        pos += id_len
        label = GraphLabel(body[pos])
        pos += 1
        code = np.frombuffer(body, dtype=np.uint8, count=n_bytes, offset=pos).copy()
        pos += n_bytes
        wsi_id = graph_id.rsplit("/", 1)[0] if "/" in graph_id else ""
        entries.append(IndexEntry(graph_id=graph_id, wsi_id=wsi_id, label=label, code=code))
    if pos != len(body):
        raise DataError(f"{path}: {len(body) - pos} trailing bytes")
    return BinaryCodeIndex(code_bits=code_bits, entries=entries)
