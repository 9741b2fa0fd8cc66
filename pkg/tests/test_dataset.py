import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from carid.dataset import (
    BBoxOutOfBounds,
    ClassTooSmall,
    ImageRecord,
    MissingAnnotationFile,
    Split,
    _apportion,
    crop_to_bbox,
    dedup_by_perceptual_hash,
    dhash,
    hamming_distance,
    load_manifest,
    load_prepared_manifest,
    save_manifest,
    stratified_split,
    LoadReport,
)


def _write_corpus(root, rows, class_names=None, image_size=16):
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for rel, *_ in rows:
        arr = rng.integers(0, 255, (image_size, image_size, 3), dtype=np.uint8)
        Image.fromarray(arr).save(root / rel)
    with open(root / "annotations.csv", "w", newline="") as fp:
        csv.writer(fp).writerows(rows)
    if class_names:
        (root / "classes.txt").write_text("".join(n + "\n" for n in class_names))


def _record(path="x.png", class_id=0, bbox=(0, 0, 4, 4)):
    return ImageRecord(image_path=path, class_id=class_id, class_name=f"class_{class_id}",
                       bbox=bbox)


class TestLoadManifest:
    def test_counts_and_classes(self, tmp_path):
        rows = [(f"images/{c}_{i}.png", c, 0, 0, 16, 16) for c in range(3) for i in range(4)]
        _write_corpus(tmp_path, rows, class_names=["Audi A4 2012", "BMW M3 2014", "Kia Rio 2016"])
        manifest, report = load_manifest(tmp_path)
        assert len(manifest.records) == 12
        assert manifest.num_classes == 3
        assert manifest.class_names[1] == "BMW M3 2014"
        assert manifest.records[0].class_name == "Audi A4 2012"
        assert not report.issues

    def test_empty_annotation_file(self, tmp_path):
        tmp_path.joinpath("annotations.csv").write_text("")
        manifest, report = load_manifest(tmp_path)
        assert manifest.records == []
        assert manifest.num_classes == 0
        assert not report.issues

    def test_missing_annotation_file(self, tmp_path):
        with pytest.raises(MissingAnnotationFile):
            load_manifest(tmp_path)

    def test_malformed_rows_reported_with_line_numbers(self, tmp_path):
        rows = [("images/a.png", 0, 0, 0, 16, 16), ("images/b.png", 0, 0, 0, 16, 16)]
        _write_corpus(tmp_path, rows)
        with open(tmp_path / "annotations.csv", "a", newline="") as fp:
            fp.write("images/a.png,not_an_int,0,0,4,4\n")
            fp.write("too,few\n")
        manifest, report = load_manifest(tmp_path)
        assert len(manifest.records) == 2
        kinds = [(i.error, i.line_no) for i in report.issues]
        assert ("malformed_row", 3) in kinds and ("malformed_row", 4) in kinds

    def test_missing_image_reported_not_dropped(self, tmp_path):
        rows = [("images/a.png", 0, 0, 0, 16, 16), ("images/gone.png", 0, 0, 0, 16, 16)]
        _write_corpus(tmp_path, rows)
        (tmp_path / "images/gone.png").unlink()
        manifest, report = load_manifest(tmp_path)
        assert len(manifest.records) == 2  # still listed
        assert [i.error for i in report.issues] == ["image_not_found"]

    def test_report_jsonl(self, tmp_path):
        report = LoadReport()
        report.add("image_not_found", path="x.png")
        out = tmp_path / "report.jsonl"
        report.write_jsonl(out)
        assert '"error": "image_not_found"' in out.read_text()


class TestCrop:
    def test_full_image_identity(self):
        img = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
        out = crop_to_bbox(_record(bbox=(0, 0, 4, 4)), img)
        assert np.array_equal(out, img)

    def test_center_block(self):
        img = np.arange(4 * 4, dtype=np.uint8).reshape(4, 4)
        out = crop_to_bbox(_record(bbox=(1, 1, 3, 3)), img)
        assert out.shape == (2, 2)
        assert np.array_equal(out, img[1:3, 1:3])

    def test_out_of_bounds(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(BBoxOutOfBounds):
            crop_to_bbox(_record(bbox=(0, 0, 5, 5)), img)

    def test_origin_pixel(self):
        img = np.random.default_rng(1).integers(0, 255, (6, 7, 3), dtype=np.uint8)
        out = crop_to_bbox(_record(bbox=(2, 3, 6, 5)), img)
        assert out.shape == (2, 4, 3)
        assert np.array_equal(out[0, 0], img[3, 2])

    @given(st.integers(0, 6), st.integers(0, 6), st.integers(1, 2), st.integers(1, 2))
    @settings(max_examples=40, deadline=None)
    def test_crop_composes_with_full_crop(self, x0, y0, w, h):
        img = np.random.default_rng(7).integers(0, 255, (8, 8, 3), dtype=np.uint8)
        bbox = (x0, y0, x0 + w, y0 + h)
        full = crop_to_bbox(_record(bbox=(0, 0, 8, 8)), img)
        assert np.array_equal(
            crop_to_bbox(_record(bbox=bbox), full),
            crop_to_bbox(_record(bbox=bbox), img),
        )


def _reference_dhash(array, hash_size=8):
    """Independent difference hash: block-mean greyscale reduction."""
    grey = np.asarray(array, dtype=np.float64) @ [0.299, 0.587, 0.114]
    h, w = grey.shape
    bh, bw = h // hash_size, w // (hash_size + 1)
    reduced = grey[: bh * hash_size, : bw * (hash_size + 1)]
    reduced = reduced.reshape(hash_size, bh, hash_size + 1, bw).mean(axis=(1, 3))
    bits = (reduced[:, :-1] > reduced[:, 1:]).flatten()
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def _smooth_image(seed=3, h=64, w=72):
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(40, 215, (h // 8, w // 8, 3))
    img = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)
    return img.astype(np.uint8)


class TestDedup:
    def test_identical_files_dropped_at_distance_zero(self, tmp_path):
        img = _smooth_image()
        for name in ("a.png", "b.png"):
            Image.fromarray(img).save(tmp_path / name)
        records = [_record(tmp_path / "a.png"), _record(tmp_path / "b.png")]
        kept, dropped = dedup_by_perceptual_hash(records, hash_size=8, threshold=10)
        assert [r.image_path.name for r in kept] == ["a.png"]
        assert len(dropped) == 1
        duplicate, of = dropped[0]
        assert duplicate.image_path.name == "b.png" and of.image_path.name == "a.png"
        assert hamming_distance(dhash(img), dhash(img)) == 0

    def test_half_brightness_copy_is_a_duplicate(self, tmp_path):
        # Oracle first: an independent difference hash agrees the pair is
        # within 10 bits, so the dedup contract must drop the copy.
        img = _smooth_image()
        half = (img.astype(np.float64) * 0.5).astype(np.uint8)
        assert hamming_distance(_reference_dhash(img), _reference_dhash(half)) <= 10
        Image.fromarray(img).save(tmp_path / "orig.png")
        Image.fromarray(half).save(tmp_path / "half.png")
        records = [_record(tmp_path / "orig.png"), _record(tmp_path / "half.png")]
        kept, dropped = dedup_by_perceptual_hash(records, hash_size=8, threshold=10)
        assert len(kept) == 1 and len(dropped) == 1

    def test_threshold_zero_keeps_distinct_hashes(self, tmp_path):
        rng = np.random.default_rng(5)
        records = []
        for i in range(4):
            arr = rng.integers(0, 255, (64, 72, 3), dtype=np.uint8)
            Image.fromarray(arr).save(tmp_path / f"{i}.png")
            records.append(_record(tmp_path / f"{i}.png"))
        hashes = [dhash(np.asarray(Image.open(r.image_path))) for r in records]
        assert len(set(hashes)) == 4  # precondition: no identical hashes
        kept, dropped = dedup_by_perceptual_hash(records, hash_size=8, threshold=0)
        assert len(kept) == 4 and not dropped

    def test_dedup_idempotent(self, tmp_path):
        rng = np.random.default_rng(11)
        records = []
        for i in range(8):
            arr = _smooth_image(seed=i)
            if i % 2:
                arr = (arr * 0.55).astype(np.uint8)  # near-duplicates of i-1
            Image.fromarray(arr).save(tmp_path / f"{i}.png")
            records.append(_record(tmp_path / f"{i}.png"))
        kept, dropped = dedup_by_perceptual_hash(records)
        kept2, dropped2 = dedup_by_perceptual_hash(kept)
        assert kept2 == kept and dropped2 == []

    def test_undecodable_reported_and_kept(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        report = LoadReport()
        kept, dropped = dedup_by_perceptual_hash([_record(tmp_path / "bad.png")], report=report)
        assert len(kept) == 1 and not dropped
        assert report.issues[0].error == "undecodable_image"


class TestStratifiedSplit:
    def _manifest(self, per_class, n_classes=3):
        from carid.dataset import DatasetManifest

        records = [
            ImageRecord(image_path=f"{c}_{i}.png", class_id=c, class_name=f"class_{c}",
                        bbox=(0, 0, 4, 4))
            for c in range(n_classes) for i in range(per_class)
        ]
        return DatasetManifest(records=records, num_classes=n_classes,
                               class_names=[f"class_{c}" for c in range(n_classes)])

    def test_exact_division(self):
        out = stratified_split(self._manifest(10), (0.8, 0.1, 0.1), seed=0)
        for c in range(3):
            recs = [r for r in out.records if r.class_id == c]
            counts = {s: sum(r.split == s for r in recs) for s in Split}
            assert counts == {Split.TRAIN: 8, Split.VAL: 1, Split.TEST: 1}

    def test_deterministic(self):
        m = self._manifest(10)
        a = stratified_split(m, (0.8, 0.1, 0.1), seed=42)
        b = stratified_split(m, (0.8, 0.1, 0.1), seed=42)
        assert [r.split for r in a.records] == [r.split for r in b.records]
        c = stratified_split(m, (0.8, 0.1, 0.1), seed=43)
        assert [r.split for r in a.records] != [r.split for r in c.records]

    def test_class_too_small(self):
        m = self._manifest(10)
        m.records = m.records[:-8]  # class 2 keeps 2 records
        with pytest.raises(ClassTooSmall) as err:
            stratified_split(m, (0.8, 0.1, 0.1), seed=0)
        assert err.value.class_id == 2

    def test_bad_ratios_rejected(self):
        with pytest.raises(ValueError):
            stratified_split(self._manifest(10), (0.8, 0.1, 0.2), seed=0)

    def test_disjoint_and_total_on_200_records(self):
        m = self._manifest(50, n_classes=4)
        out = stratified_split(m, (0.7, 0.15, 0.15), seed=1)
        assert len(out.records) == 200
        paths_by_split = {s: {r.image_path for r in out.records if r.split == s}
                          for s in Split}
        union = set.union(*paths_by_split.values())
        assert len(union) == 200  # every record in exactly one split
        for a in Split:
            for b in Split:
                if a != b:
                    assert not (paths_by_split[a] & paths_by_split[b])

    @given(st.integers(5, 60), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_per_class_sizes_within_one_of_exact(self, per_class, seed):
        ratios = (0.7, 0.15, 0.15)
        sizes = _apportion(per_class, ratios)
        assert sum(sizes) == per_class
        for size, ratio in zip(sizes, ratios):
            assert abs(size - per_class * ratio) < 1


class TestManifestRoundTrip:
    def test_save_and_load(self, tmp_path, synth_manifest):
        path = tmp_path / "manifest.csv"
        save_manifest(synth_manifest, path)
        loaded = load_prepared_manifest(path)
        assert loaded.num_classes == synth_manifest.num_classes
        assert loaded.class_names == synth_manifest.class_names
        assert [(str(r.image_path), r.class_id, r.bbox, r.split) for r in loaded.records] == \
               [(str(r.image_path), r.class_id, r.bbox, r.split) for r in synth_manifest.records]
