"""Full two-branch model state and its versioned binary checkpoint.

Checkpoint layout (little-endian)::

    "LSTC" | u32 version=1 | u32 stage | u32 d | u32 c | u32 d_k | u32 K | u32 M
    | u8 attn_scale | f64 threshold | u32 param_count
    per param (declared order): u32 name_len | utf-8 name | u32 rows | u32 cols
                                | rows*cols float64, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DimensionError, FormatError
from ..feature_bank import ByteReader
from ..fusion import fuse
from ..long_term import FeatureWindow, LongTermBranch, LongTermParams
from ..short_term import ShortTermBranch, ShortTermParams

MAGIC = b"LSTC"
VERSION = 1


@dataclass
class ModelState:
    short: ShortTermParams
    long: LongTermParams
    stage: int = 1
    threshold: float = 0.5
    attn_scale: bool = True

    def __post_init__(self):
        if self.short.d != self.long.d or self.short.c != self.long.c:
            raise DimensionError("short- and long-term branches disagree on (d, c)")

    @property
    def d(self):
        return self.short.d

    @property
    def c(self):
        return self.short.c

    @classmethod
    def init(cls, d, c, rng, k=2, m=2, d_k=0, attn_scale=True, threshold=0.5, scale=1.0):
        short = ShortTermParams.init(d, c, rng, scale)
        long = LongTermParams.init(d, c, rng, k=k, m=m, d_k=d_k or max(1, d // 2), scale=scale)
        return cls(short, long, 1, threshold, attn_scale)

    def named_params(self):
        yield from self.short.named_params("short.")
        yield from self.long.named_params("long.")

    def trainable(self):
        """Parameters updated in the model's current stage."""
        if self.stage == 1:
            return list(self.short.named_params("short."))
        return list(self.named_params())

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def copy(self):
        return ModelState.from_bytes(self.to_bytes())

    # -------------------------------------------------------------- forward

    def branches(self):
        return ShortTermBranch(self.short, self.attn_scale), LongTermBranch(self.long)

    def logits(self, fmap, feats, window: FeatureWindow = None):
        """(Z_s, Z_l) for one clip; Z_l is zero for a stage-1 model."""
        st, lt = self.branches()
        z_s = st.forward(fmap, feats)
        if self.stage == 1:
            return z_s, np.zeros_like(z_s)
        window = window if window is not None else FeatureWindow.empty(self.d)
        return z_s, lt.forward(feats, window)

    def probs(self, fmap, feats, window=None):
        return fuse(self.logits(fmap, feats, window))

    # ----------------------------------------------------------- checkpoint

    def to_bytes(self) -> bytes:
        lt = self.long
        out = [MAGIC, struct.pack("<IIIIIII", VERSION, self.stage, self.d, self.c, lt.d_k, lt.k, lt.m),
               struct.pack("<Bd", int(bool(self.attn_scale)), self.threshold)]
        named = list(self.named_params())
        out.append(struct.pack("<I", len(named)))
        for name, p in named:
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)) + raw)
            out.append(struct.pack("<II", *p.shape))
            out.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return b"".join(out)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelState":
        r = ByteReader(buf)
        if r.take(4, "magic") != MAGIC:
            raise FormatError("bad magic, expected b'LSTC'", 0)
        version = r.u32("version")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        head_at = r.pos
        stage, d, c, d_k, k, m = (r.u32(f) for f in ("stage", "d", "c", "d_k", "K", "M"))
        if stage not in (1, 2) or min(d, c, d_k, k, m) < 1:
            raise FormatError(f"invalid header stage={stage} d={d} c={c} d_k={d_k} K={k} M={m}",
                              head_at)
        flag_at = r.pos
        flag = r.u8("attn_scale flag")
        if flag > 1:
            raise FormatError("attn_scale flag must be 0 or 1", flag_at)
        thr_at = r.pos
        threshold = r.f64("threshold")
        if not 0.0 < threshold < 1.0:
            raise FormatError(f"threshold {threshold} outside (0, 1)", thr_at)
        # skeleton with the declared shapes; values are overwritten below
        rng = np.random.default_rng(0)
        model = cls.init(d, c, rng, k=k, m=m, d_k=d_k, attn_scale=bool(flag), threshold=threshold)
        model.stage = stage
        named = list(model.named_params())
        count_at = r.pos
        count = r.u32("param count")
        if count != len(named):
            raise FormatError(f"expected {len(named)} parameter blocks, found {count}", count_at)
        for name, p in named:
            entry_at = r.pos
            got = r.take(r.u32("name length"), "param name")
            if got != name.encode("utf-8"):
                raise FormatError(f"expected parameter {name!r}, found {got!r}", entry_at)
            shape_at = r.pos
            shape = (r.u32("rows"), r.u32("cols"))
            if shape != p.shape:
                raise FormatError(f"{name}: shape {shape} != expected {p.shape}", shape_at)
            data_at = r.pos
            value = r.f64_matrix(*shape, name)
            if not np.all(np.isfinite(value)):
                raise FormatError(f"{name}: non-finite value", data_at)
            p.value[...] = value
        if r.pos != len(buf):
            raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
        return model

    @classmethod
    def load(cls, path) -> "ModelState":
        return cls.from_bytes(Path(path).read_bytes())
