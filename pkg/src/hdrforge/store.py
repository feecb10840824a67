"""Binary patch store: a single sequential file of PatchRecords.

Layout (little-endian):
    magic "HDRP" | u32 version | u32 record count
    per record: u8 k | u16 size | inputs float32 (k*size*size*6)
                | target float32 (size*size*3) | u8 motion flag
                | u32 provenance length | provenance utf-8

One writer produces the file; readers index record offsets once and may then
fetch records concurrently.
"""

from __future__ import annotations

import struct

import numpy as np

from .dataset import PatchRecord

MAGIC = b"HDRP"
VERSION = 1

_HEADER = struct.Struct("<4sII")
_REC_HEAD = struct.Struct("<BH")


class StoreError(RuntimeError):
    """Raised for corrupt or truncated patch stores."""


def write_store(path, records):
    """Write records sequentially; returns the record count."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(records)))
        for rec in records:
            f.write(_REC_HEAD.pack(rec.k, rec.size))
            f.write(np.ascontiguousarray(rec.inputs, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(rec.target, dtype="<f4").tobytes())
            prov = rec.provenance.encode("utf-8")
            f.write(struct.pack("<BI", int(rec.motion_flag), len(prov)))
            f.write(prov)
    return len(records)


class PatchStore:
    """Random-access reader over a patch-store file."""

    def __init__(self, path):
        self.path = path
        self._f = open(path, "rb")
        try:
            head = self._f.read(_HEADER.size)
            if len(head) != _HEADER.size:
                raise StoreError(f"{path}: truncated header")
            magic, version, count = _HEADER.unpack(head)
            if magic != MAGIC:
                raise StoreError(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise StoreError(f"{path}: unsupported version {version}")
            self._offsets = self._index(count)
        except Exception:
            self._f.close()
            raise

    def _index(self, count):
        offsets = []
        pos = _HEADER.size
        for i in range(count):
            offsets.append(pos)
            self._f.seek(pos)
            head = self._f.read(_REC_HEAD.size)
            if len(head) != _REC_HEAD.size:
                raise StoreError(f"{self.path}: truncated at record {i} (offset {pos})")
            k, size = _REC_HEAD.unpack(head)
            body = 4 * (k * size * size * 6 + size * size * 3)
            self._f.seek(pos + _REC_HEAD.size + body)
            tail = self._f.read(5)
            if len(tail) != 5:
                raise StoreError(f"{self.path}: truncated at record {i} (offset {pos})")
            _, prov_len = struct.unpack("<BI", tail)
            pos += _REC_HEAD.size + body + 5 + prov_len
        end = self._f.seek(0, 2)
        if pos > end:
            raise StoreError(f"{self.path}: truncated at record {count - 1}")
        return offsets

    def __len__(self):
        return len(self._offsets)

    def __getitem__(self, i):
        if not 0 <= i < len(self._offsets):
            raise IndexError(i)
        self._f.seek(self._offsets[i])
        k, size = _REC_HEAD.unpack(self._f.read(_REC_HEAD.size))
        inputs = np.frombuffer(self._f.read(4 * k * size * size * 6), dtype="<f4")
        inputs = inputs.reshape(k, size, size, 6).copy()
        target = np.frombuffer(self._f.read(4 * size * size * 3), dtype="<f4")
        target = target.reshape(size, size, 3).copy()
        flag, prov_len = struct.unpack("<BI", self._f.read(5))
        prov = self._f.read(prov_len).decode("utf-8")
        return PatchRecord(inputs, target, bool(flag), prov)

    def batch(self, indices):
        """Stack records into (inputs, targets) float32 batch arrays."""
        recs = [self[int(i)] for i in indices]
        return (np.stack([r.inputs for r in recs]),
                np.stack([r.target for r in recs]))

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_store(path):
    """Load an entire store into memory as a list of PatchRecords."""
    with PatchStore(path) as store:
        return [store[i] for i in range(len(store))]
