"""On-disk dataset contract: manifest, per-video feature blobs, annotations.

Directory layout::

    manifest.json        video list, grid dims, K, class names, image-to-grid scale
    features_<id>.bin    b"ACTF1", then per frame: u32 C, H, W + float32 data (little-endian)
    annotations.json     [{video_id, t, anchors: [{box, score}], actions: [{box, class_id}]}]

Boxes are ``(x1, y1, x2, y2)`` in feature-grid units, x along width.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetParseError, ValidationError

FEATURE_MAGIC = b"ACTF1"
_HDR = struct.Struct("<III")

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class AnchorDetection:
    box: Box
    score: float


@dataclass(frozen=True)
class FrameRecord:
    video_id: str
    t: int
    feature_map: np.ndarray = field(repr=False, compare=False)
    anchors: tuple[AnchorDetection, ...] = ()
    ground_truth: tuple[tuple[Box, int], ...] = ()
    split: str = "train"

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.t == other.t
            and self.anchors == other.anchors
            and self.ground_truth == other.ground_truth
            and self.split == other.split
            and self.feature_map.shape == other.feature_map.shape
            and bool(np.array_equal(self.feature_map, other.feature_map))
        )

    __hash__ = None


@dataclass
class DatasetInfo:
    grid: tuple[int, int, int]
    K: int
    class_names: list[str]
    image_to_grid_scale: float = 1.0
    videos: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def filter_anchors(frame: FrameRecord, threshold: float = 0.8) -> list[AnchorDetection]:
    """Anchors whose detector score is strictly above ``threshold``, in order."""
    return [a for a in frame.anchors if a.score > threshold]


def box_is_valid(box: Box) -> bool:
    x1, y1, x2, y2 = box
    return x1 < x2 and y1 < y2


def _validate_frame(frame: FrameRecord, info: DatasetInfo, n_frames: int) -> None:
    where = f"video {frame.video_id!r} frame t={frame.t}"
    C, H, W = info.grid
    if not 1 <= frame.t <= n_frames:
        raise ValidationError(f"{where}: t outside 1..{n_frames}")
    if frame.feature_map.shape != (C, H, W):
        raise ValidationError(f"{where}: feature map {frame.feature_map.shape} != grid {(C, H, W)}")
    for a in frame.anchors:
        if not box_is_valid(a.box):
            raise ValidationError(f"{where}: anchor box {a.box} has x2<=x1 or y2<=y1")
        if a.box[0] < 0 or a.box[1] < 0 or a.box[2] > W or a.box[3] > H:
            raise ValidationError(f"{where}: anchor box {a.box} outside grid {W}x{H}")
        if not 0.0 <= a.score <= 1.0:
            raise ValidationError(f"{where}: anchor score {a.score} outside [0,1]")
    for box, cls in frame.ground_truth:
        if not box_is_valid(box):
            raise ValidationError(f"{where}: action box {box} has x2<=x1 or y2<=y1")
        x1, y1, x2, y2 = box
        if x1 < 0 or y1 < 0 or x2 > W or y2 > H:
            raise ValidationError(f"{where}: action box {box} outside grid {W}x{H}")
        if not 0 <= cls < info.K:
            raise ValidationError(f"{where}: class_id {cls} outside [0,{info.K})")


def _parse_json(path: Path):
    text = path.read_text()
    if not text.strip():
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path.name} line {exc.lineno}: {exc.msg}") from exc


def load_manifest(path: str | os.PathLike) -> DatasetInfo | None:
    root = Path(path)
    raw = _parse_json(root / "manifest.json")
    if raw is None:
        return None
    try:
        info = DatasetInfo(
            grid=tuple(int(v) for v in raw["grid"]),
            K=int(raw["K"]),
            class_names=list(raw["class_names"]),
            image_to_grid_scale=float(raw.get("image_to_grid_scale", 1.0)),
            videos=list(raw.get("videos", [])),
            extra={k: v for k, v in raw.items() if k not in {"grid", "K", "class_names", "image_to_grid_scale", "videos"}},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"manifest.json line 1: missing or invalid field ({exc})") from exc
    if len(info.grid) != 3:
        raise DatasetParseError("manifest.json line 1: grid must be [C, H, W]")
    return info


def read_features(path: str | os.PathLike) -> list[np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(FEATURE_MAGIC):
        raise DatasetParseError(f"{Path(path).name}: bad feature magic")
    pos = len(FEATURE_MAGIC)
    frames = []
    while pos < len(blob):
        if pos + _HDR.size > len(blob):
            raise DatasetParseError(f"{Path(path).name}: truncated header at byte {pos}")
        C, H, W = _HDR.unpack_from(blob, pos)
        pos += _HDR.size
        n = C * H * W * 4
        if pos + n > len(blob):
            raise DatasetParseError(f"{Path(path).name}: truncated frame at byte {pos}")
        arr = np.frombuffer(blob, dtype="<f4", count=C * H * W, offset=pos).reshape(C, H, W)
        frames.append(arr.astype(np.float64))
        pos += n
    return frames


def write_features(path: str | os.PathLike, maps: list[np.ndarray]) -> None:
    chunks = [FEATURE_MAGIC]
    for m in maps:
        chunks.append(_HDR.pack(*m.shape))
        chunks.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _box(seq) -> Box:
    return tuple(float(v) for v in seq)


def load_dataset(path: str | os.PathLike) -> list[FrameRecord]:
    """Read and validate a dataset directory; frames sorted by (video_id, t)."""
    root = Path(path)
    info = load_manifest(root)
    if info is None or not info.videos:
        return []
    ann = _parse_json(root / "annotations.json") or []
    by_key: dict[tuple[str, int], dict] = {}
    for i, entry in enumerate(ann):
        try:
            by_key[(str(entry["video_id"]), int(entry["t"]))] = entry
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(f"annotations.json entry {i}: {exc}") from exc

    frames: list[FrameRecord] = []
    for video in info.videos:
        vid = str(video["id"])
        split = str(video.get("split", "train"))
        maps = read_features(root / f"features_{vid}.bin")
        n = int(video.get("frames", len(maps)))
        if len(maps) != n:
            raise ValidationError(f"video {vid!r}: {len(maps)} feature frames, manifest says {n}")
        for t, fmap in enumerate(maps, start=1):
            entry = by_key.get((vid, t), {})
            anchors = tuple(
                AnchorDetection(_box(a["box"]), float(a["score"])) for a in entry.get("anchors", [])
            )
            gts = tuple((_box(a["box"]), int(a["class_id"])) for a in entry.get("actions", []))
            rec = FrameRecord(vid, t, fmap, anchors, gts, split)
            _validate_frame(rec, info, n)
            frames.append(rec)
    frames.sort(key=lambda f: (f.video_id, f.t))
    return frames


def save_dataset(path: str | os.PathLike, frames: list[FrameRecord], info: DatasetInfo) -> None:
    """Write ``frames`` in the directory format read by :func:`load_dataset`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    videos: dict[str, list[FrameRecord]] = {}
    for f in sorted(frames, key=lambda f: (f.video_id, f.t)):
        videos.setdefault(f.video_id, []).append(f)
    manifest = {
        "grid": list(info.grid),
        "K": info.K,
        "class_names": list(info.class_names),
        "image_to_grid_scale": info.image_to_grid_scale,
        "videos": [
            {"id": vid, "frames": len(fs), "split": fs[0].split} for vid, fs in videos.items()
        ],
        **info.extra,
    }
    annotations = []
    for vid, fs in videos.items():
        write_features(root / f"features_{vid}.bin", [f.feature_map for f in fs])
        for f in fs:
            annotations.append(
                {
                    "video_id": vid,
                    "t": f.t,
                    "anchors": [{"box": list(a.box), "score": a.score} for a in f.anchors],
                    "actions": [{"box": list(b), "class_id": c} for b, c in f.ground_truth],
                }
            )
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (root / "annotations.json").write_text(json.dumps(annotations, indent=1) + "\n")


def group_videos(frames: list[FrameRecord]) -> dict[str, list[FrameRecord]]:
    """Frames per video, each list ordered by t."""
    out: dict[str, list[FrameRecord]] = {}
    for f in sorted(frames, key=lambda f: (f.video_id, f.t)):
        out.setdefault(f.video_id, []).append(f)
    return out
