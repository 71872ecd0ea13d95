"""Time-indexed store of per-clip actor features.

On-disk layout (little-endian)::

    "LFB1" | u32 version=1 | u32 dim | u32 video_count
    per video:  u32 name_len | utf-8 name | u32 record_count
    per record: i64 timestamp_s | u32 n_rows | n_rows*dim float64, row-major

Videos are written in sorted name order, records in timestamp order.
"""
from __future__ import annotations

import bisect
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .long_term import FeatureWindow
from .numerics import as_matrix

MAGIC = b"LFB1"
VERSION = 1


@dataclass(frozen=True)
class BankRecord:
    video_id: str
    timestamp_s: int
    feats: np.ndarray


@dataclass(frozen=True)
class WindowSpec:
    radius_s: int = 8
    include_center: bool = False

    def __post_init__(self):
        if self.radius_s < 0:
            raise ValueError("window radius must be non-negative")


class FeatureBank:
    """Per-video timelines, each sorted strictly ascending by timestamp.

    Single writer; query_window hands out copies so readers never see a
    later mutation.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise DimensionError("bank dimension must be at least 1")
        self.dim = int(dim)
        self._times: dict[str, list[int]] = {}
        self._feats: dict[str, list[np.ndarray]] = {}

    def insert(self, record: BankRecord) -> "FeatureBank":
        feats = as_matrix(record.feats, "bank record")
        if feats.shape[1] != self.dim:
            raise DimensionError(f"record dim {feats.shape[1]} != bank dim {self.dim}")
        t = int(record.timestamp_s)
        times = self._times.setdefault(record.video_id, [])
        rows = self._feats.setdefault(record.video_id, [])
        pos = bisect.bisect_left(times, t)
        if pos < len(times) and times[pos] == t:
            rows[pos] = feats
        else:
            times.insert(pos, t)
            rows.insert(pos, feats)
        return self

    def videos(self):
        return sorted(self._times)

    def timeline(self, video_id):
        return list(self._times.get(video_id, []))

    def records(self, video_id):
        for t, f in zip(self._times.get(video_id, []), self._feats.get(video_id, [])):
            yield BankRecord(video_id, t, f)

    def __len__(self):
        return sum(len(t) for t in self._times.values())

    def __eq__(self, other):
        if not isinstance(other, FeatureBank) or other.dim != self.dim:
            return False
        if self.videos() != other.videos():
            return False
        for v in self.videos():
            if self._times[v] != other._times[v]:
                return False
            for a, b in zip(self._feats[v], other._feats[v]):
                if a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
        return True

    def query_window(self, video_id, t, spec: WindowSpec = WindowSpec()) -> FeatureWindow:
        times = self._times.get(video_id, [])
        lo = bisect.bisect_left(times, t - spec.radius_s)
        hi = bisect.bisect_right(times, t + spec.radius_s)
        blocks, stamps = [], []
        for i in range(lo, hi):
            if times[i] == t and not spec.include_center:
                continue
            f = self._feats[video_id][i]
            blocks.append(f)
            stamps.extend([times[i]] * f.shape[0])
        if not blocks:
            return FeatureWindow.empty(self.dim)
        return FeatureWindow(np.concatenate(blocks, axis=0), tuple(stamps))

    # ------------------------------------------------------------------ io

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<III", VERSION, self.dim, len(self._times))]
        for v in self.videos():
            name = v.encode("utf-8")
            out.append(struct.pack("<I", len(name)))
            out.append(name)
            out.append(struct.pack("<I", len(self._times[v])))
            for t, f in zip(self._times[v], self._feats[v]):
                out.append(struct.pack("<qI", t, f.shape[0]))
                out.append(np.ascontiguousarray(f, dtype="<f8").tobytes())
        return b"".join(out)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, expected_dim=None) -> "FeatureBank":
        r = ByteReader(buf)
        if r.take(4, "magic") != MAGIC:
            raise FormatError("bad magic, expected b'LFB1'", 0)
        version = r.u32("version")
        if version != VERSION:
            raise FormatError(f"unsupported bank version {version}", 4)
        dim_at = r.pos
        dim = r.u32("dim")
        if dim < 1:
            raise FormatError("bank dimension must be at least 1", dim_at)
        if expected_dim is not None and dim != expected_dim:
            raise FormatError(f"bank dim {dim} != expected {expected_dim}", dim_at)
        bank = cls(dim)
        for _ in range(r.u32("video count")):
            name_at = r.pos
            name_len = r.u32("name length")
            try:
                name = r.take(name_len, "video name").decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError("video name is not valid utf-8", name_at + 4) from None
            if name in bank._times:
                raise FormatError(f"duplicate video {name!r}", name_at)
            times, rows = [], []
            for _ in range(r.u32("record count")):
                rec_at = r.pos
                t = r.i64("timestamp")
                n = r.u32("row count")
                data_at = r.pos
                feats = r.f64_matrix(n, dim, "features")
                if times and t <= times[-1]:
                    raise FormatError("timestamps not strictly ascending", rec_at)
                if not np.all(np.isfinite(feats)):
                    raise FormatError("non-finite feature value", data_at)
                times.append(t)
                rows.append(feats)
            bank._times[name] = times
            bank._feats[name] = rows
        if r.pos != len(buf):
            raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
        return bank

    @classmethod
    def load(cls, path, expected_dim=None) -> "FeatureBank":
        return cls.from_bytes(Path(path).read_bytes(), expected_dim)

    def summary_rows(self):
        for v in self.videos():
            times = self._times[v]
            rows = sum(f.shape[0] for f in self._feats[v])
            yield v, len(times), rows, times[0] if times else None, times[-1] if times else None

    def iter_ndjson(self):
        """One JSON object per record; for inspection only (floats are printed, not bit-exact)."""
        for v in self.videos():
            for t, f in zip(self._times[v], self._feats[v]):
                yield json.dumps({"video_id": v, "timestamp_s": t, "rows": f.shape[0],
                                  "feats": f.tolist()})


class ByteReader:
    """Cursor over a byte buffer that reports the offset of any short read."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                              self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def _unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]

    def u8(self, what):
        return self._unpack("<B", what)

    def u32(self, what):
        return self._unpack("<I", what)

    def i64(self, what):
        return self._unpack("<q", what)

    def f64(self, what):
        return self._unpack("<d", what)

    def f64_matrix(self, rows, cols, what):
        raw = self.take(8 * rows * cols, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
