import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiface.dataset import (
    BBox, Dataset, DatasetError, FaceRecord, ImageRecord, SyntheticConfig,
    assign_labels, gen_synthetic, image_label, iou, load_dataset, max_fakes, save_dataset,
)
from multiface.metrics import roc_auc


def _write_jsonl(path, header, rows):
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def _face(fid, label, feature, bbox=(0, 0, 1, 1)):
    return {"face_id": fid, "bbox": list(bbox), "label": label, "feature": feature}


HEADER4 = {"format": "filter-ds", "version": 1, "feature_dim": 4}


class TestLoad:
    def test_minimal_file(self, tmp_path):
        p = tmp_path / "d.jsonl"
        _write_jsonl(p, HEADER4, [{"image_id": "a", "label": 1, "faces": [
            _face("a0", 0, [1, 0, 0, 0]), _face("a1", 1, [0, 1, 0, 0])]}])
        ds = load_dataset(p)
        assert len(ds.images) == 1 and ds.n_faces == 2
        assert [f.label for f in ds.images[0].faces] == [0, 1]

    def test_image_label_must_follow_max_rule(self, tmp_path):
        p = tmp_path / "d.jsonl"
        _write_jsonl(p, HEADER4, [{"image_id": "a", "label": 0, "faces": [
            _face("a0", 0, [1, 0, 0, 0]), _face("a1", 1, [0, 1, 0, 0])]}])
        with pytest.raises(DatasetError, match="image label violates max rule"):
            load_dataset(p)

    def test_dimension_mismatch(self, tmp_path):
        p = tmp_path / "d.jsonl"
        _write_jsonl(p, HEADER4, [{"image_id": "a", "label": 0, "faces": [_face("a0", 0, [1, 0, 0])]}])
        with pytest.raises(DatasetError, match="dimension mismatch"):
            load_dataset(p)

    def test_error_names_line(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps(HEADER4) + "\n{not json\n")
        with pytest.raises(DatasetError, match="line 2"):
            load_dataset(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps({"format": "other"}) + "\n")
        with pytest.raises(DatasetError, match="header"):
            load_dataset(p)

    def test_duplicate_image_id(self):
        f = FaceRecord("x", BBox(0, 0, 1, 1), [1.0, 0.0], 0)
        with pytest.raises(DatasetError, match="duplicate"):
            Dataset(2, [ImageRecord("a", [f], 0), ImageRecord("a", [f], 0)])

    def test_round_trip(self, tmp_path):
        ds = gen_synthetic(SyntheticConfig(num_images=20, feature_dim=8), seed=4)
        ds.images[0].faces[0].track_id = "t0"
        save_dataset(ds, tmp_path / "a.jsonl")
        back = load_dataset(tmp_path / "a.jsonl")
        assert back.feature_dim == ds.feature_dim and back.split_tag == ds.split_tag
        for a, b in zip(ds.images, back.images):
            assert (a.image_id, a.label) == (b.image_id, b.label)
            for fa, fb in zip(a.faces, b.faces):
                assert (fa.face_id, fa.label, fa.bbox, fa.track_id) == (fb.face_id, fb.label, fb.bbox, fb.track_id)
                assert np.array_equal(fa.feature, fb.feature)
        save_dataset(back, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class TestIoU:
    def test_identity(self):
        b = BBox(3, 4, 5, 6)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 1, 1)) == 0.0

    def test_partial_overlap(self):
        # intersection 1x1, union 4 + 4 - 1
        assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)

    def test_bad_box(self):
        with pytest.raises(DatasetError):
            BBox(0, 0, 0, 1)

    boxes = st.builds(
        BBox,
        st.floats(-50, 50), st.floats(-50, 50),
        st.floats(0.1, 40), st.floats(0.1, 40),
    )

    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert iou(a, a) == pytest.approx(1.0, abs=1e-12)


class TestAssign:
    def test_self_match(self):
        gt = [(BBox(0, 0, 2, 2), 1), (BBox(10, 0, 2, 2), 0)]
        out = assign_labels([g for g, _ in gt], gt)
        assert [a.label for a in out] == [1, 0]
        assert [a.matched_gt_index for a in out] == [0, 1]

    def test_below_threshold_unmatched(self):
        # IoU 0.1: boxes overlap on a 2x1 strip, union 20 - 2
        det, g = BBox(0, 0, 2, 10), BBox(0, 9, 2, 10)
        assert iou(det, g) == pytest.approx(2 / 38)
        out = assign_labels([det], [(g, 1)], threshold=0.5)
        assert out[0].label is None and not out[0].matched

    def test_max_iou_wins(self):
        det = BBox(0, 0, 2, 2)
        gt = [(BBox(1, 1, 2, 2), 1), (BBox(0, 0, 2, 3), 0)]
        assert iou(det, gt[0][0]) == pytest.approx(1 / 7)
        assert iou(det, gt[1][0]) == pytest.approx(4 / 6)
        out = assign_labels([det], gt)
        assert out[0].label == 0 and out[0].matched_gt_index == 1

    def test_tie_goes_to_lowest_index(self):
        det = BBox(0, 0, 2, 2)
        gt = [(BBox(1, 0, 2, 2), 1), (BBox(-1, 0, 2, 2), 0)]
        out = assign_labels([det], gt, threshold=0.1)
        assert out[0].matched_gt_index == 0 and out[0].label == 1

    @settings(max_examples=60)
    @given(st.data())
    def test_gt_permutation_does_not_change_labels(self, data):
        coord = st.floats(0, 20, allow_nan=False)
        size = st.floats(1, 10)
        gt = data.draw(st.lists(st.tuples(st.builds(BBox, coord, coord, size, size), st.integers(0, 1)),
                                min_size=1, max_size=6))
        det = data.draw(st.lists(st.builds(BBox, coord, coord, size, size), min_size=1, max_size=6))
        perm = data.draw(st.permutations(range(len(gt))))
        # exact IoU ties between differently-labelled boxes make the result order-dependent by design
        for d in det:
            vals = [iou(d, g) for g, _ in gt]
            best = max(vals)
            if len({gt[i][1] for i, v in enumerate(vals) if v == best}) > 1:
                return
        a = assign_labels(det, gt, threshold=0.2)
        b = assign_labels(det, [gt[i] for i in perm], threshold=0.2)
        assert [x.label for x in a] == [x.label for x in b]


class TestImageLabel:
    @pytest.mark.parametrize("labels,want", [([0, 0, 0], 0), ([0, 1, 0], 1), ([1], 1)])
    def test_examples(self, labels, want):
        assert image_label(labels) == want

    def test_empty(self):
        with pytest.raises(DatasetError):
            image_label([])

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=20))
    def test_appending_fake_never_lowers(self, labels):
        assert image_label(labels + [1]) >= image_label(labels)
        assert image_label(labels + [1]) == 1


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        cfg = SyntheticConfig(num_images=30)
        save_dataset(gen_synthetic(cfg, 11), tmp_path / "a.jsonl")
        save_dataset(gen_synthetic(cfg, 11), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_image_without_fakes_is_real(self):
        ds = gen_synthetic(SyntheticConfig(num_images=200, fake_fraction=0.05), 1)
        clean = [img for img in ds.images if all(f.label == 0 for f in img.faces)]
        assert clean and all(img.label == 0 for img in clean)

    def test_noise_free_cosines(self):
        ds = gen_synthetic(SyntheticConfig(num_images=50, sigma=0.0, theta=math.pi / 2), 2)
        seen_mixed = False
        for img in ds.images:
            x = img.features / np.linalg.norm(img.features, axis=1, keepdims=True)
            labels = np.array([f.label for f in img.faces])
            s = x @ x.T
            same = labels[:, None] == labels[None, :]
            assert np.allclose(s[same], 1.0, atol=1e-12)
            assert np.allclose(s[~same], 0.0, atol=1e-12)
            seen_mixed |= bool((~same).any())
        assert seen_mixed

    def test_fakes_are_a_strict_minority(self):
        cfg = SyntheticConfig(num_images=300, faces_per_image=(2, 5), fake_fraction=0.9)
        for img in gen_synthetic(cfg, 3).images:
            n, k = len(img.faces), sum(f.label for f in img.faces)
            assert k <= max_fakes(n, 2) and 2 * k < n

    @pytest.mark.parametrize("field,value", [
        ("num_images", 0), ("faces_per_image", (1, 3)), ("faces_per_image", (4, 3)),
        ("fake_fraction", 1.0), ("sigma", -1.0), ("theta", 0.0),
    ])
    def test_config_validation(self, field, value):
        with pytest.raises(DatasetError):
            gen_synthetic(SyntheticConfig(**{field: value}), 0)

    def test_single_face_features_carry_no_label_signal(self):
        # per-face linear probe (least squares on raw features) on held-out faces
        ds = gen_synthetic(SyntheticConfig(num_images=1000, sigma=0.1, theta=math.pi / 2), 5)
        X = np.array([f.feature for img in ds.images for f in img.faces])
        y = np.array([f.label for img in ds.images for f in img.faces], dtype=float)
        assert len(y) >= 1000
        cut = int(0.7 * len(y))
        A = np.hstack([X[:cut], np.ones((cut, 1))])
        w, *_ = np.linalg.lstsq(A, y[:cut], rcond=None)
        scores = np.hstack([X[cut:], np.ones((len(y) - cut, 1))]) @ w
        auc = roc_auc(scores, y[cut:].astype(int))
        assert abs(auc - 0.5) <= 0.05
