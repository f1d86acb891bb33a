"""Bit-exact portable container for named float32 tensors (.cmsw files).

Layout::

    magic "CMSW" | version u32 LE (=1) | header_len u64 LE
    | UTF-8 JSON header: {name: {"shape": [...], "offset": int, "nbytes": int}}
      (keys sorted lexicographically, no whitespace)
    | payload: raw little-endian float32, offsets relative to payload start

Entries are laid out back to back in sorted-name order, so equal archives
always serialize to identical bytes. The format is auditable with a hex
editor and needs no dependency beyond json.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"CMSW"
VERSION = 1


class ArchiveError(ValueError):
    """Base for malformed .cmsw files."""


class BadMagicError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


class HeaderError(ArchiveError):
    """Header is not valid JSON / entry fields malformed."""


class EntryRangeError(ArchiveError):
    """Entry overlaps another or points outside the payload."""


class TruncatedPayloadError(ArchiveError):
    pass


class WeightArchive:
    """Immutable name -> float32 array container."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        store: Dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            if not name or not isinstance(name, str) or not name.isascii():
                raise ArchiveError(f"tensor name must be nonempty ASCII: {name!r}")
            a = np.ascontiguousarray(arr, dtype=np.float32)
            store[name] = a
        self._arrays = store

    def names(self):
        return sorted(self._arrays)

    def get(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        for name in self.names():
            yield name, self._arrays[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightArchive):
            return NotImplemented
        if self.names() != other.names():
            return False
        return all(
            a.shape == other.get(n).shape
            and a.tobytes() == other.get(n).tobytes()
            for n, a in self.items())


def save(archive: WeightArchive, path) -> None:
    """Write the archive; byte-deterministic for equal archives."""
    header = {}
    offset = 0
    chunks = []
    for name, arr in archive.items():
        le = arr.astype("<f4", copy=False)
        raw = le.tobytes()
        header[name] = {"shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(hjson)))
        fh.write(hjson)
        for raw in chunks:
            fh.write(raw)


def load(path) -> WeightArchive:
    """Parse and fully validate a .cmsw file; values are bit-exact."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a CMSW archive")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if header_end > len(blob):
        raise TruncatedPayloadError(f"{path}: header extends past end of file")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: bad header ({exc})") from None
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header must be a JSON object")

    payload = blob[header_end:]
    # validate every entry against the actual payload length before slicing
    spans = []
    for name, ent in header.items():
        if not name or not name.isascii():
            raise HeaderError(f"{path}: bad tensor name {name!r}")
        if (not isinstance(ent, dict)
                or sorted(ent) != ["nbytes", "offset", "shape"]
                or not isinstance(ent["offset"], int)
                or not isinstance(ent["nbytes"], int)
                or not isinstance(ent["shape"], list)
                or not all(isinstance(d, int) and d >= 0 for d in ent["shape"])):
            raise HeaderError(f"{path}: malformed entry for {name!r}")
        count = int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1
        if ent["nbytes"] != 4 * count:
            raise HeaderError(
                f"{path}: {name!r} nbytes {ent['nbytes']} != 4*product(shape)")
        if ent["offset"] < 0 or ent["offset"] + ent["nbytes"] > len(payload):
            raise EntryRangeError(
                f"{path}: {name!r} spans [{ent['offset']}, "
                f"{ent['offset'] + ent['nbytes']}) beyond payload of {len(payload)}")
        spans.append((ent["offset"], ent["offset"] + ent["nbytes"], name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise EntryRangeError(f"{path}: entries {n0!r} and {n1!r} overlap")

    arrays = {}
    for name, ent in header.items():
        raw = payload[ent["offset"]:ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(ent["shape"]).astype(np.float32)
        arrays[name] = arr
    return WeightArchive(arrays)
