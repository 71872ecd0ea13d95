"""Synthetic clip datasets with local and long-term (co-occurrence) classes.

Each video has a cast of actor identities; every identity owns an embedding
that is written into the grid cells under that actor's box, so pooled actor
features carry identity. Local classes add class-specific pattern vectors to
the same cells and are therefore decodable from the clip alone. The first
``n_interaction`` local classes are relational: an actor is positive when some
other actor in the same clip carries that pattern, which only clip-level
context can reveal.

Long-term class ``j`` has an anchor identity and a partner identity. An anchor
actor is positive for ``j`` exactly when the partner appears in some *other*
clip of the same video within ``context_radius_s`` seconds. Nothing in the
current clip reveals this, so only context from neighbouring clips helps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..evaluation import Box, GroundTruthRecord, write_records
from ..short_term import ClipFeatureMap
from .config import SynthConfig
from .roi import box_cells, pool_actors


@dataclass
class Clip:
    video_id: str
    timestamp_s: int
    fmap: ClipFeatureMap
    boxes: list
    labels: np.ndarray  # N x c, binary
    identities: list = field(default_factory=list)
    split: str = "train"

    @property
    def n(self):
        return len(self.boxes)

    def actor_feats(self):
        return pool_actors(self.fmap, self.boxes)


@dataclass
class Dataset:
    config: SynthConfig
    clips: list
    anchors: list = field(default_factory=list)
    partners: list = field(default_factory=list)

    @property
    def d(self):
        return self.config.d

    @property
    def c(self):
        return self.config.c

    def subset(self, split):
        if split in (None, "all"):
            return list(self.clips)
        return [c for c in self.clips if c.split == split]

    def find(self, video_id, timestamp_s):
        for c in self.clips:
            if c.video_id == video_id and c.timestamp_s == timestamp_s:
                return c
        raise KeyError(f"no clip {video_id}@{timestamp_s}")

    def gt_records(self, split="all"):
        out = []
        for clip in self.subset(split):
            for a, box in enumerate(clip.boxes):
                for cls in np.nonzero(clip.labels[a])[0]:
                    out.append(GroundTruthRecord(clip.video_id, clip.timestamp_s,
                                                 Box(*box), int(cls)))
        return out

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        arrays = {}
        index = []
        for i, clip in enumerate(self.clips):
            arrays[f"x{i}"] = clip.fmap.x
            arrays[f"boxes{i}"] = np.array(clip.boxes, dtype=np.float64).reshape(-1, 4)
            arrays[f"labels{i}"] = clip.labels
            index.append({"video_id": clip.video_id, "timestamp_s": clip.timestamp_s,
                          "identities": [int(v) for v in clip.identities], "split": clip.split})
        np.savez(out / "clips.npz", **arrays)
        meta = {"config": self.config.to_dict(), "clips": index,
                "anchors": [int(a) for a in self.anchors],
                "partners": [int(p) for p in self.partners]}
        (out / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        write_records(self.gt_records("all"), out / "gt.csv")
        for split in ("train", "test"):
            write_records(self.gt_records(split), out / f"gt_{split}.csv")

    @classmethod
    def load(cls, data_dir):
        root = Path(data_dir)
        try:
            meta = json.loads((root / "dataset.json").read_text())
            arrays = np.load(root / "clips.npz")
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read dataset in {root}: {exc}") from None
        cfg = SynthConfig.from_dict(meta["config"])
        h, w, t = cfg.grid
        clips = []
        for i, entry in enumerate(meta["clips"]):
            boxes = [tuple(float(v) for v in b) for b in arrays[f"boxes{i}"]]
            clips.append(Clip(entry["video_id"], int(entry["timestamp_s"]),
                              ClipFeatureMap(h, w, t, np.array(arrays[f"x{i}"])),
                              boxes, np.array(arrays[f"labels{i}"]),
                              entry["identities"], entry["split"]))
        return cls(cfg, clips, meta.get("anchors", []), meta.get("partners", []))


def _slot_boxes(rng, n):
    """Boxes in disjoint vertical bands so actors never share grid cells."""
    boxes = []
    for k in range(n):
        x1, x2 = k / n, (k + 1) / n
        y1 = rng.uniform(0.0, 0.3)
        y2 = rng.uniform(0.7, 1.0)
        boxes.append((round(x1 + 0.01, 6), round(y1, 6), round(x2 - 0.01, 6), round(y2, 6)))
    return boxes


def synth_generate(cfg: SynthConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    h, w, t = cfg.grid
    d = cfg.d
    identity = rng.normal(size=(cfg.n_identities, d))
    patterns = rng.normal(size=(cfg.c_local, d))
    order = rng.permutation(cfg.n_identities)
    anchors = [int(order[2 * j]) for j in range(cfg.c_longterm)]
    partners = [int(order[2 * j + 1]) for j in range(cfg.c_longterm)]
    lo, hi = cfg.actors_per_clip

    clips = []
    for v in range(cfg.n_videos + cfg.n_test_videos):
        video_id = f"vid{v:03d}"
        split = "train" if v < cfg.n_videos else "test"
        cast = rng.choice(cfg.n_identities, size=cfg.cast_size, replace=False)
        video_clips = []
        for k in range(cfg.clips_per_video):
            n = int(rng.integers(lo, hi + 1))
            ids = [int(i) for i in rng.choice(cast, size=n, replace=False)]
            boxes = _slot_boxes(rng, n)
            local = (rng.random((n, cfg.c_local)) < cfg.local_rate).astype(np.float64)
            grid = cfg.noise_sigma * rng.normal(size=(t, h, w, d))
            for a in range(n):
                signal = identity[ids[a]] + local[a] @ patterns
                for i, j in box_cells(h, w, boxes[a]):
                    grid[:, i, j, :] += signal
            labels = np.zeros((n, cfg.c))
            labels[:, :cfg.c_local] = local
            for cls in range(cfg.n_interaction):
                others = local[:, cls].sum() - local[:, cls]
                labels[:, cls] = (others > 0).astype(np.float64)
            fmap = ClipFeatureMap(h, w, t, grid.reshape(t * h * w, d))
            video_clips.append(Clip(video_id, k, fmap, boxes, labels, ids, split))
        for clip in video_clips:
            nearby = set()
            for other in video_clips:
                if other is not clip and abs(other.timestamp_s - clip.timestamp_s) <= cfg.context_radius_s:
                    nearby.update(other.identities)
            for a, ident in enumerate(clip.identities):
                for j in range(cfg.c_longterm):
                    if ident == anchors[j] and partners[j] in nearby:
                        clip.labels[a, cfg.c_local + j] = 1.0
        clips.extend(video_clips)
    return Dataset(cfg, clips, anchors, partners)
