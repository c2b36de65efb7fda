"""Synthetic feature-space videos with planted spatial and temporal cues.

Each video hosts one instrument ("actor") per class group:

* motion pairs: the instrument slides horizontally along a band and
  bounces between the walls. Its current position is uniform and
  independent of the direction, so a single frame cannot tell the two
  classes apart; only the displacement across frames can.
* context pairs: the instrument sits still inside a ring of tissue
  cells. The ring carries a sign on a shared context channel, redrawn
  every frame, and the class is that sign. The box itself never
  overlaps the ring (a one-cell gap), so the crop is class-independent.
* leftover classes (not in any pair) get a static instrument with a
  unique appearance.

Channel layout for ``G`` groups: ``[0, G)`` appearance, ``G`` x-ramp,
``G+1`` y-ramp, ``G+2`` context sign, the rest noise only.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import AnchorDetection, DatasetInfo, FrameRecord, save_dataset
from .errors import ConfigurationError

BAND_HEIGHT = 4
CONTEXT_BLOCK = 6
STATIC_BLOCK = 4
BOX = 2


@dataclass
class SyntheticSpec:
    num_videos: int = 16
    frames_per_video: int = 32
    K: int = 8
    grid: tuple[int, int, int] = (16, 16, 16)
    motion_classes: list[tuple[int, int]] = field(default_factory=lambda: [(0, 1), (2, 3)])
    context_classes: list[tuple[int, int]] = field(default_factory=lambda: [(4, 5), (6, 7)])
    seed: int = 0
    noise: float = 0.5
    appearance: float = 3.0
    ring_appearance: float = 1.5
    context_strength: float = 2.0
    position_strength: float = 2.0
    anchor_jitter: float = 0.25
    distractors: int = 1
    decoy_cells: int = 20
    test_fraction: float = 0.25

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigurationError(f"unknown field(s): {', '.join(unknown)}")
        kw = dict(raw)
        try:
            if "grid" in kw:
                kw["grid"] = tuple(int(v) for v in kw["grid"])
            for key in ("motion_classes", "context_classes"):
                if key in kw:
                    kw[key] = [tuple(int(c) for c in pair) for pair in kw[key]]
            for key in ("num_videos", "frames_per_video", "K", "seed", "distractors", "decoy_cells"):
                if key in kw:
                    kw[key] = int(kw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed field value: {exc}") from exc
        spec = cls(**kw)
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "SyntheticSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"spec line {exc.lineno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigurationError(f"cannot read spec {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("spec must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = list(self.grid)
        d["motion_classes"] = [list(p) for p in self.motion_classes]
        d["context_classes"] = [list(p) for p in self.context_classes]
        return d

    def groups(self) -> list[tuple[str, tuple[int, ...]]]:
        """(kind, classes) per actor; kind in {motion, context, static}."""
        paired = {c for p in self.motion_classes + self.context_classes for c in p}
        out = [("motion", tuple(p)) for p in self.motion_classes]
        out += [("context", tuple(p)) for p in self.context_classes]
        out += [("static", (k,)) for k in range(self.K) if k not in paired]
        return out

    def class_names(self) -> list[str]:
        names = [f"class_{k}" for k in range(self.K)]
        for i, (a, b) in enumerate(self.motion_classes):
            names[a], names[b] = f"advance_{i}", f"retract_{i}"
        for i, (a, b) in enumerate(self.context_classes):
            names[a], names[b] = f"press_{i}", f"lift_{i}"
        return names

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigurationError(f"K: need at least 2 classes, got {self.K}")
        if self.num_videos < 1:
            raise ConfigurationError(f"num_videos: must be >= 1, got {self.num_videos}")
        if self.frames_per_video < 1:
            raise ConfigurationError(f"frames_per_video: must be >= 1, got {self.frames_per_video}")
        if self.motion_classes and self.frames_per_video < 2:
            raise ConfigurationError("frames_per_video: motion classes need at least 2 frames")
        seen: set[int] = set()
        for key in ("motion_classes", "context_classes"):
            for pair in getattr(self, key):
                if len(pair) != 2 or pair[0] == pair[1]:
                    raise ConfigurationError(f"{key}: {pair} is not a pair of distinct classes")
                for c in pair:
                    if not 0 <= c < self.K:
                        raise ConfigurationError(f"{key}: class {c} outside [0,{self.K})")
                    if c in seen:
                        raise ConfigurationError(f"{key}: class {c} appears in more than one pair")
                    seen.add(c)
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigurationError(f"grid: expected positive (C,H,W), got {self.grid}")
        if self.noise < 0 or not 0 <= self.anchor_jitter < 0.5:
            raise ConfigurationError("noise must be >= 0 and anchor_jitter in [0, 0.5)")
        if not 0 <= self.test_fraction < 1:
            raise ConfigurationError(f"test_fraction: must lie in [0,1), got {self.test_fraction}")
        C = self.grid[0]
        need = len(self.groups()) + 3
        if C < need:
            raise ConfigurationError(f"grid: {C} channels cannot host {need - 3} groups plus 3 cue channels")
        _layout(self)


def _layout(spec: SyntheticSpec) -> dict[str, list]:
    """Band rows for motion actors and block origins for the rest."""
    _, H, W = spec.grid
    kinds = [k for k, _ in spec.groups()]
    bands, blocks = [], {"context": [], "static": []}
    y = 0
    if "motion" in kinds and W < BOX + 1:
        raise ConfigurationError(f"grid: width {W} too small for a moving box")
    for _ in range(kinds.count("motion")):
        bands.append(y)
        y += BAND_HEIGHT
    x, row_h = 0, 0
    for kind, size in (("context", CONTEXT_BLOCK), ("static", STATIC_BLOCK)):
        for _ in range(kinds.count(kind)):
            if size > W:
                raise ConfigurationError(f"grid: width {W} cannot host a {size}x{size} box+context block")
            if x + size > W:
                y, x, row_h = y + row_h, 0, 0
            blocks[kind].append((x, y))
            x += size
            row_h = max(row_h, size)
    if y + row_h > H:
        raise ConfigurationError(f"grid: {H}x{W} too small to host every box with its context")
    return {"bands": bands, **blocks}


def _fold(u: int, n: int) -> tuple[int, bool]:
    """Position on a bounce track of n cells from phase u on a 2n cycle; True if moving right."""
    u %= 2 * n
    return (u, True) if u < n else (2 * n - 1 - u, False)


def _ring_cells(x0: int, y0: int) -> list[tuple[int, int]]:
    cells = []
    for dy in range(CONTEXT_BLOCK):
        for dx in range(CONTEXT_BLOCK):
            if dx in (0, CONTEXT_BLOCK - 1) or dy in (0, CONTEXT_BLOCK - 1):
                cells.append((y0 + dy, x0 + dx))
    return cells


def _jitter_box(rng, box, j, W, H):
    x1, y1, x2, y2 = (v + rng.uniform(-j, j) for v in box)
    x1, y1 = max(x1, 0.0), max(y1, 0.0)
    x2, y2 = min(x2, float(W)), min(y2, float(H))
    return tuple(round(v, 4) for v in (x1, y1, x2, y2))


def generate_frames(spec: SyntheticSpec) -> list[FrameRecord]:
    spec.validate()
    C, H, W = spec.grid
    rng = np.random.default_rng(spec.seed)
    groups = spec.groups()
    G = len(groups)
    ch_x, ch_y, ch_ctx = G, G + 1, G + 2
    lay = _layout(spec)
    ramp_x = ((np.arange(W) + 0.5) / W * 2 - 1) * spec.position_strength
    ramp_y = ((np.arange(H) + 0.5) / H * 2 - 1) * spec.position_strength
    n_track = W - BOX + 1
    n_test = int(round(spec.num_videos * spec.test_fraction))
    if spec.num_videos >= 2 and spec.test_fraction > 0:
        n_test = max(n_test, 1)

    frames: list[FrameRecord] = []
    for v in range(spec.num_videos):
        vid = f"v{v:03d}"
        split = "test" if v >= spec.num_videos - n_test else "train"
        bands = list(rng.permutation(lay["bands"])) if lay["bands"] else []
        ctx_blocks = [lay["context"][i] for i in rng.permutation(len(lay["context"]))]
        st_blocks = [lay["static"][i] for i in rng.permutation(len(lay["static"]))]
        actors = []
        for g, (kind, classes) in enumerate(groups):
            if kind == "motion":
                actors.append({"g": g, "kind": kind, "classes": classes, "band": int(bands.pop()),
                               "phase": int(rng.integers(0, 2 * n_track))})
            elif kind == "context":
                actors.append({"g": g, "kind": kind, "classes": classes, "origin": ctx_blocks.pop()})
            else:
                actors.append({"g": g, "kind": kind, "classes": classes, "origin": st_blocks.pop()})

        for t in range(1, spec.frames_per_video + 1):
            fmap = rng.normal(0.0, spec.noise, size=(C, H, W)) if spec.noise > 0 else np.zeros((C, H, W))
            fmap[ch_x] += ramp_x[None, :]
            fmap[ch_y] += ramp_y[:, None]
            occupied = np.zeros((H, W), dtype=bool)
            gts = []
            for a in actors:
                if a["kind"] == "motion":
                    x, right = _fold(a["phase"] + t - 1, n_track)
                    y = a["band"] + 1
                    cls = a["classes"][0] if right else a["classes"][1]
                elif a["kind"] == "context":
                    x0, y0 = a["origin"]
                    x, y = x0 + 2, y0 + 2
                    sign = 1.0 if rng.random() < 0.5 else -1.0
                    cls = a["classes"][0] if sign > 0 else a["classes"][1]
                    for r, c in _ring_cells(x0, y0):
                        fmap[a["g"], r, c] += spec.ring_appearance
                        fmap[ch_ctx, r, c] += sign * spec.context_strength
                    occupied[y0 : y0 + CONTEXT_BLOCK, x0 : x0 + CONTEXT_BLOCK] = True
                else:
                    x0, y0 = a["origin"]
                    x, y = x0 + 1, y0 + 1
                    cls = a["classes"][0]
                fmap[a["g"], y : y + BOX, x : x + BOX] += spec.appearance
                occupied[max(y - 1, 0) : y + BOX + 1, max(x - 1, 0) : x + BOX + 1] = True
                gts.append(((float(x), float(y), float(x + BOX), float(y + BOX)), int(cls)))

            free = np.flatnonzero(~occupied)
            if spec.decoy_cells > 0 and free.size:
                pick = rng.choice(free, size=min(spec.decoy_cells, free.size), replace=False)
                sign = 1.0 if rng.random() < 0.5 else -1.0
                fmap[ch_ctx].reshape(-1)[pick] += sign * spec.context_strength

            anchors = []
            for box, _ in gts:
                score = max(round(0.8 + 0.2 * (1.0 - rng.random()), 4), 0.8001)
                anchors.append(AnchorDetection(_jitter_box(rng, box, spec.anchor_jitter, W, H), score))
            for _ in range(spec.distractors):
                x = float(rng.integers(0, W - BOX + 1))
                y = float(rng.integers(0, H - BOX + 1))
                score = min(round(0.5 + 0.3 * rng.random(), 4), 0.7999)
                box = _jitter_box(rng, (x, y, x + BOX, y + BOX), spec.anchor_jitter, W, H)
                anchors.append(AnchorDetection(box, score))
            fmap = fmap.astype(np.float32).astype(np.float64)
            frames.append(FrameRecord(vid, t, fmap, tuple(anchors), tuple(gts), split))
    return frames


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike) -> Path:
    """Generate the dataset described by ``spec`` and write it to ``out_dir``."""
    frames = generate_frames(spec)
    info = DatasetInfo(
        grid=tuple(spec.grid),
        K=spec.K,
        class_names=spec.class_names(),
        image_to_grid_scale=1.0,
        extra={"spec": spec.to_dict(), "seed": spec.seed},
    )
    save_dataset(out_dir, frames, info)
    return Path(out_dir)
