import json

import numpy as np
import pytest

from anchorctx.dataset import (
    AnchorDetection,
    DatasetInfo,
    FrameRecord,
    filter_anchors,
    load_dataset,
    load_manifest,
    read_features,
    save_dataset,
    write_features,
)
from anchorctx.errors import DatasetParseError, ValidationError


def _frame(t, fmap=None, anchors=None, gts=None, vid="a"):
    fmap = np.zeros((2, 4, 5)) if fmap is None else fmap
    anchors = anchors if anchors is not None else (AnchorDetection((0.0, 0.0, 2.0, 2.0), 0.9),)
    gts = gts if gts is not None else (((0.0, 0.0, 2.0, 2.0), 1),)
    return FrameRecord(vid, t, fmap, tuple(anchors), tuple(gts), "train")


def _info():
    return DatasetInfo(grid=(2, 4, 5), K=3, class_names=["x", "y", "z"])


class TestFilterAnchors:
    def test_strictly_above_threshold(self):
        f = _frame(1, anchors=[AnchorDetection((0, 0, 1, 1), 0.9), AnchorDetection((1, 1, 2, 2), 0.7)])
        assert filter_anchors(f, 0.8) == [f.anchors[0]]

    def test_zero_threshold_passes_all(self):
        f = _frame(1, anchors=[AnchorDetection((0, 0, 1, 1), 0.1), AnchorDetection((1, 1, 2, 2), 0.7)])
        assert filter_anchors(f, 0.0) == list(f.anchors)

    def test_threshold_one_is_empty(self):
        f = _frame(1, anchors=[AnchorDetection((0, 0, 1, 1), 1.0)])
        assert filter_anchors(f, 1.0) == []

    def test_equal_score_is_excluded(self):
        f = _frame(1, anchors=[AnchorDetection((0, 0, 1, 1), 0.8)])
        assert filter_anchors(f, 0.8) == []


class TestRoundTrip:
    def test_three_frames(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = [_frame(t, rng.normal(size=(2, 4, 5)).astype(np.float32).astype(np.float64)) for t in (1, 2, 3)]
        save_dataset(tmp_path, frames, _info())
        assert load_dataset(tmp_path) == frames

    def test_sorted_by_video_then_t(self, tmp_path):
        frames = [_frame(2, vid="b"), _frame(1, vid="b"), _frame(1, vid="a")]
        save_dataset(tmp_path, frames, _info())
        assert [(f.video_id, f.t) for f in load_dataset(tmp_path)] == [("a", 1), ("b", 1), ("b", 2)]

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("")
        assert load_dataset(tmp_path) == []

    def test_manifest_without_videos(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"grid": [1, 1, 1], "K": 2, "class_names": ["a", "b"]}))
        assert load_dataset(tmp_path) == []

    def test_feature_blob_layout(self, tmp_path):
        m = np.arange(6, dtype=np.float64).reshape(1, 2, 3)
        write_features(tmp_path / "f.bin", [m, m + 1])
        blob = (tmp_path / "f.bin").read_bytes()
        assert blob[:5] == b"ACTF1"
        assert np.frombuffer(blob[5:17], "<u4").tolist() == [1, 2, 3]
        back = read_features(tmp_path / "f.bin")
        assert len(back) == 2 and np.array_equal(back[1], m + 1)

    def test_manifest_records_scale(self, tmp_path):
        info = _info()
        info.image_to_grid_scale = 0.0625
        save_dataset(tmp_path, [_frame(1)], info)
        assert load_manifest(tmp_path).image_to_grid_scale == 0.0625


class TestValidation:
    def _save_then_edit(self, tmp_path, edit):
        save_dataset(tmp_path, [_frame(1)], _info())
        ann = json.loads((tmp_path / "annotations.json").read_text())
        edit(ann[0])
        (tmp_path / "annotations.json").write_text(json.dumps(ann))

    def test_inverted_box(self, tmp_path):
        self._save_then_edit(tmp_path, lambda e: e["actions"][0].update(box=[2.0, 0.0, 1.0, 2.0]))
        with pytest.raises(ValidationError, match="t=1"):
            load_dataset(tmp_path)

    def test_box_outside_grid_names_frame(self, tmp_path):
        self._save_then_edit(tmp_path, lambda e: e["anchors"][0].update(box=[3.0, 0.0, 6.0, 2.0]))
        with pytest.raises(ValidationError, match="video 'a' frame t=1"):
            load_dataset(tmp_path)

    def test_class_out_of_range(self, tmp_path):
        self._save_then_edit(tmp_path, lambda e: e["actions"][0].update(class_id=3))
        with pytest.raises(ValidationError):
            load_dataset(tmp_path)

    def test_score_out_of_range(self, tmp_path):
        self._save_then_edit(tmp_path, lambda e: e["anchors"][0].update(score=1.5))
        with pytest.raises(ValidationError):
            load_dataset(tmp_path)

    def test_malformed_manifest_reports_line(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{\n  "grid": [1, 2, 3],\n  "K": ,\n}')
        with pytest.raises(DatasetParseError, match="line 3"):
            load_dataset(tmp_path)

    def test_frame_count_mismatch(self, tmp_path):
        save_dataset(tmp_path, [_frame(1), _frame(2)], _info())
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["videos"][0]["frames"] = 3
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValidationError):
            load_dataset(tmp_path)
