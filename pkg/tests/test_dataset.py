import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from charcascade.dataset import (
    Annotation, AnnotationFormat, Box, DatasetConfig, discover, dumps_manifest, extract_positives,
    format_annotation, load_annotation, load_manifest, load_patches, materialize, normalize_number_plate,
    overlap, parse_annotation, plate_views, positive_windows, prepare, sample_negatives, save_manifest,
    save_patches, split_3to1,
)
from charcascade.features import DIGIT_APERTURE, Aperture
from charcascade.imaging import Rect
from charcascade.synthetic import plate_frame

rects = st.builds(Rect, st.integers(0, 20), st.integers(0, 20), st.integers(1, 15), st.integers(1, 15))


def single_scale(**kw):
    base = dict(scan_stride=1, max_scale=1.0)
    base.update(kw)
    return DatasetConfig(**base)


class TestOverlap:
    def test_identical_and_disjoint(self):
        r = Rect(3, 4, 10, 10)
        assert overlap(r, r) == 1.0
        assert overlap(r, Rect(13, 4, 10, 10)) == 0.0
        assert overlap(r, Rect(50, 50, 2, 2)) == 0.0

    def test_offset_squares(self):
        # shifted 5 along one axis: 50 / 150; along both: 25 / 175
        assert overlap(Rect(0, 0, 10, 10), Rect(5, 0, 10, 10)) == pytest.approx(1 / 3)
        assert overlap(Rect(0, 0, 10, 10), Rect(5, 5, 10, 10)) == pytest.approx(25 / 175)
        assert oracles.iou_pixels((0, 0, 10, 10), (5, 5, 10, 10)) == pytest.approx(25 / 175)

    @settings(max_examples=300)
    @given(a=rects, b=rects)
    def test_matches_pixel_count(self, a, b):
        v = overlap(a, b)
        assert v == pytest.approx(oracles.iou_pixels(a, b), abs=1e-12)
        assert v == overlap(b, a) and 0.0 <= v <= 1.0


class TestPositives:
    def test_full_threshold_needs_identity(self):
        cfg = single_scale(overlap_threshold=1.0)
        assert positive_windows(100, 40, [Rect(10, 10, 54, 18)], cfg) == [Rect(10, 10, 54, 18)]
        cfg = single_scale(overlap_threshold=1.0, scan_stride=4)
        assert positive_windows(100, 40, [Rect(10, 10, 54, 18)], cfg) == []

    def test_aligned_box_count_matches_lattice_scan(self):
        box = Rect(20, 11, 54, 18)
        cfg = single_scale(overlap_threshold=0.8)
        got = positive_windows(120, 50, [box], cfg)
        want = oracles.count_windows(120, 50, 54, 18, 1, tuple(box), 0.8)
        assert len(got) == want > 1

    @settings(max_examples=25, deadline=None)
    @given(t1=st.floats(0.3, 1.0), t2=st.floats(0.3, 1.0), x=st.integers(0, 40), y=st.integers(0, 30),
           s=st.floats(1.0, 1.6))
    def test_monotone_in_threshold(self, t1, t2, x, y, s):
        lo, hi = sorted((t1, t2))
        box = Rect(x, y, round(54 * s), round(18 * s))
        a = positive_windows(140, 70, [box], DatasetConfig(overlap_threshold=lo))
        b = positive_windows(140, 70, [box], DatasetConfig(overlap_threshold=hi))
        assert set(b) <= set(a)
        for r in a:
            assert oracles.iou_area(tuple(r), tuple(box)) >= lo

    def test_patches_are_aperture_sized(self):
        img, ann = plate_frame(1)
        patches, src = extract_positives([ann], [img], DatasetConfig(overlap_threshold=0.6))
        assert patches.shape[1:] == (18, 54) and len(patches) == len(src) > 0
        assert all(p.image_id == ann.image_id for p in src)

    def test_unreachable_box_is_skipped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = positive_windows(100, 40, [Rect(0, 0, 10, 4)], DatasetConfig())
        assert out == [] and "no window" in caplog.text

    def test_parallel_extraction_keeps_order(self):
        frames = [plate_frame(s) for s in range(4)]
        cfg = DatasetConfig(overlap_threshold=0.6)
        a = extract_positives([f[1] for f in frames], [f[0] for f in frames], cfg, workers=1)
        b = extract_positives([f[1] for f in frames], [f[0] for f in frames], cfg, workers=4)
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]


class TestNegatives:
    def test_box_covering_everything(self):
        img = np.zeros((18, 54), np.uint8)
        ann = Annotation("a", [Box(Rect(0, 0, 54, 18), "number")])
        patches, _ = sample_negatives([ann], [img], DatasetConfig(), 10)
        assert len(patches) == 0

    def test_seeded_and_clear_of_boxes(self):
        frames = [plate_frame(s, 160, 100) for s in range(3)]
        imgs, anns = [f[0] for f in frames], [f[1] for f in frames]
        cfg = DatasetConfig(overlap_threshold=0.3, seed=4)
        a, sa = sample_negatives(anns, imgs, cfg, 200)
        b, sb = sample_negatives(anns, imgs, cfg, 200)
        assert sa == sb and np.array_equal(a, b) and len(a) == 200
        assert len(set(sa)) == 200
        by_id = {x.image_id: x for x in anns}
        for s in sa:
            for box in by_id[s.image_id].rects():
                assert oracles.iou_area(tuple(s.rect), tuple(box)) < 0.3
        c, sc = sample_negatives(anns, imgs, DatasetConfig(overlap_threshold=0.3, seed=5), 200)
        assert sc != sa

    def test_short_pool_warns(self, caplog):
        img = np.zeros((20, 60), np.uint8)
        with caplog.at_level(logging.WARNING):
            patches, _ = sample_negatives([Annotation("a")], [img], single_scale(), 1000)
        assert len(patches) == 7 * 3 and "only" in caplog.text

    def test_label_only_exclusion(self):
        img, ann = plate_frame(2, 160, 100)
        cfg = DatasetConfig(overlap_threshold=0.5, negative_exclusion="label", aperture=DIGIT_APERTURE,
                            scan_stride=1)
        _, src = sample_negatives([ann], [img], cfg, 5000, label="7")
        digit_boxes = [b.rect for b in ann.boxes if b.label == "7"]
        for s in src:
            assert all(overlap(s.rect, b) < 0.5 for b in digit_boxes)


class TestSplit:
    def test_small(self):
        assert split_3to1([1, 2, 3, 4], 0)[0].__len__() == 3

    def test_ceil_rule(self):
        tr, te = split_3to1(list(range(1139)), 0)
        assert (len(tr), len(te)) == (855, 284)
        assert abs(len(tr) - 865) <= 10 and abs(len(te) - 274) <= 10

    def test_seeded(self):
        items = list(range(32))
        assert split_3to1(items, 3) == split_3to1(items, 3)
        assert split_3to1(items, 3) != split_3to1(items, 4)

    @given(seed=st.integers(0, 1000), n=st.integers(1, 60))
    def test_groups_never_straddle(self, seed, n):
        items = [(i % 7, i) for i in range(n)]
        tr, te = split_3to1(items, seed, group=lambda t: t[0])
        assert not {g for g, _ in tr} & {g for g, _ in te}
        assert sorted(tr + te) == sorted(items)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            split_3to1([], 0)


class TestPlates:
    def test_same_size_is_identity(self, rng):
        img = rng.integers(0, 256, (100, 300), dtype=np.uint8)
        assert np.array_equal(normalize_number_plate(img, Rect(7, 9, 240, 76)), img[9:85, 7:247])

    def test_two_to_one(self, rng):
        img = np.full((200, 500), 93, np.uint8)
        out = normalize_number_plate(img, Rect(3, 4, 480, 152))
        assert out.shape == (76, 240) and np.all(out == 93)

    @pytest.mark.parametrize("seed", range(4))
    def test_mean_matches_area_average(self, seed):
        rng = np.random.default_rng(seed)
        img = np.clip(rng.normal(128, 50, (160, 400)), 0, 255).astype(np.uint8)
        w, h = int(rng.integers(60, 390)), int(rng.integers(20, 150))
        box = Rect(int(rng.integers(0, 400 - w)), int(rng.integers(0, 160 - h)), w, h)
        out = normalize_number_plate(img, box, (60, 19))
        ref = oracles.area_average(img, *box, 60, 19)
        assert abs(out.mean() - ref.mean()) <= 2.0

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            normalize_number_plate(np.zeros((10, 10), np.uint8), Rect(0, 0, 0, 5))

    def test_views_map_digits(self):
        img, ann = plate_frame(3, text="123")
        anns, strips, plates = plate_views([ann], [img])
        assert strips[0].shape == (76, 240)
        assert [b.label for b in anns[0].boxes] == ["1", "2", "3"]
        assert plates[0] == ann.rects("number")[0]
        anns[0].validate(240, 76)


class TestAnnotations:
    def test_round_trip(self):
        ann = Annotation("img7", [Box(Rect(1, 2, 30, 10), "number"), Box(Rect(3, 4, 5, 6), "0")])
        assert parse_annotation(format_annotation(ann)) == ann

    def test_custom_columns(self):
        fmt = AnnotationFormat.from_dict({
            "delimiter": ",", "columns": {"class": 4, "x": 0, "y": 1, "x1": 2, "y1": 3},
            "class_map": {"plate": "number"}, "header_lines": 1,
        })
        ann = parse_annotation("x0,y0,x1,y1,cls\nimg\n10,20,64,38,plate\n# note\n0,0,5,9,4\n", fmt)
        assert ann.boxes == [Box(Rect(10, 20, 54, 18), "number"), Box(Rect(0, 0, 5, 9), "4")]

    @pytest.mark.parametrize("text", ["", "img\nnumber 1 2", "img\nletter 1 2 3 4", "img\n3 0 0 0 5"])
    def test_bad_annotations(self, text):
        with pytest.raises(ValueError):
            parse_annotation(text)

    def test_missing_file_is_named(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.txt"):
            load_annotation(tmp_path / "nope.txt")

    def test_box_outside_image(self):
        with pytest.raises(ValueError, match="outside"):
            Annotation("a", [Box(Rect(5, 5, 10, 10), "1")]).validate(12, 12)

    def test_discover_pairs_sidecars(self, tmp_path):
        np.save(tmp_path / "b.npy", np.zeros((4, 4), np.uint8))
        np.save(tmp_path / "a.npy", np.zeros((4, 4), np.uint8))
        (tmp_path / "a.txt").write_text("first\nnumber 0 0 3 3\n")
        (tmp_path / "notes.md").write_text("ignored")
        found = discover(tmp_path)
        assert [a.image_id for a, _ in found] == ["b", "first"]
        assert found[0][0].boxes == [] and len(found[1][0].boxes) == 1

    def test_unknown_format_key(self):
        with pytest.raises(ValueError):
            AnnotationFormat.from_dict({"sep": ","})


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(overlap_threshold=0.0), dict(overlap_threshold=1.5),
                                     dict(scan_stride=0), dict(scale_step=1.0),
                                     dict(negative_exclusion="some"), dict(split_ratio=(0, 0))])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            DatasetConfig(**bad)

    def test_round_trip(self):
        cfg = DatasetConfig(overlap_threshold=0.8, aperture="12x24", max_scale=2.0)
        assert DatasetConfig.from_dict(cfg.to_dict()) == cfg


def fixture_frames(n=8, w=160, h=100):
    return [plate_frame(100 + i, w, h, image_id=f"f{i:02d}") for i in range(n)]


class TestPrepare:
    def test_known_geometry(self):
        # one 54x18 plate per frame, aligned to the stride-1 lattice at scale 1 only
        entries = []
        for i in range(4):
            img = np.full((40, 100), 120, np.uint8)
            entries.append((Annotation(f"k{i}", [Box(Rect(10 + i, 5, 54, 18), "number")]), img))
        cfg = DatasetConfig(overlap_threshold=0.8, scan_stride=1, max_scale=1.0)
        data = prepare(entries, cfg, negatives=40)
        per_image = oracles.count_windows(100, 40, 54, 18, 1, (10, 5, 54, 18), 0.8)
        assert len(data["train"].positives) == 3 * per_image
        assert len(data["test"].positives) == per_image
        assert len(data["train"].negatives) == 30 and len(data["test"].negatives) == 10

    def test_sides_are_disjoint_and_reproducible(self, tmp_path):
        entries = [(a, i) for i, a in fixture_frames()]
        cfg = DatasetConfig(overlap_threshold=0.7, seed=9)
        data = prepare(entries, cfg, negatives=500, workers=3)
        m = data["manifest"]
        assert not set(m["images"]["train"]) & set(m["images"]["test"])
        for side in ("train", "test"):
            ids = {s.image_id for s in data[side].pos_source + data[side].neg_source}
            assert ids <= set(m["images"][side])
        save_manifest(m, tmp_path / "m.json")
        again = prepare(entries, cfg, negatives=500)
        save_manifest(again["manifest"], tmp_path / "m2.json")
        assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
        rebuilt = materialize(load_manifest(tmp_path / "m.json"), {a.image_id: i for a, i in entries})
        for side in ("train", "test"):
            assert np.array_equal(rebuilt[side].positives, data[side].positives)
            assert np.array_equal(rebuilt[side].negatives, data[side].negatives)

    def test_digit_label_uses_plate_strips(self):
        entries = [(a, i) for i, a in fixture_frames(4)]
        data = prepare(entries, DatasetConfig(overlap_threshold=0.5, seed=1), "3", negatives=100)
        assert data["train"].aperture == DIGIT_APERTURE
        rows = data["manifest"]["samples"]
        assert rows and all(len(r) == 11 for r in rows)
        rebuilt = materialize(data["manifest"], {a.image_id: i for a, i in entries})
        assert np.array_equal(rebuilt["train"].negatives, data["train"].negatives)

    def test_rejects_duplicates_and_unknown_labels(self):
        img, ann = plate_frame(0)
        with pytest.raises(ValueError, match="duplicate"):
            prepare([(ann, img), (ann, img)], DatasetConfig())
        with pytest.raises(ValueError, match="label"):
            prepare([(ann, img)], DatasetConfig(), "letter")

    def test_manifest_and_patch_store_round_trip(self, tmp_path):
        entries = [(a, i) for i, a in fixture_frames(4)]
        data = prepare(entries, DatasetConfig(seed=2), negatives=50)
        text = dumps_manifest(data["manifest"])
        assert text.count("\n") > len(data["manifest"]["samples"])
        save_patches({"train": data["train"], "test": data["test"]}, tmp_path / "p.npz")
        back = load_patches(tmp_path / "p.npz")
        assert np.array_equal(back["test"].negatives, data["test"].negatives)
        with pytest.raises(ValueError, match="unknown image"):
            materialize(data["manifest"], {})
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "missing.json")
