"""Corpus ingestion: annotated car images, bbox cropping, dedup, splits.

Expected directory layout::

    <root>/images/...          image files (any layout, paths come from the CSV)
    <root>/annotations.csv     one row per image: path,class_id,x_min,y_min,x_max,y_max
    <root>/classes.txt         optional, one class name per line (index == class_id)

Annotation paths are relative to ``<root>``. When ``classes.txt`` is absent,
class names are synthesized as ``class_<id>``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
from PIL import Image


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class DatasetError(Exception):
    """Base class for corpus-level failures."""


class MissingAnnotationFile(DatasetError):
    pass


class BBoxOutOfBounds(DatasetError):
    pass


class ClassTooSmall(DatasetError):
    def __init__(self, class_id: int, count: int):
        super().__init__(f"class {class_id} has {count} records, cannot populate all splits")
        self.class_id = class_id
        self.count = count


class ManifestInvariantError(DatasetError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image: absolute path, dense class id, pixel bbox, split."""

    image_path: Path
    class_id: int
    class_name: str
    bbox: tuple[int, int, int, int]  # (x_min, y_min, x_max, y_max)
    split: Split | None = None


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    num_classes: int
    class_names: list[str]
    source_tag: str = ""

    def validate(self) -> None:
        """Raise ManifestInvariantError on any structural violation."""
        if len(self.class_names) != self.num_classes:
            raise ManifestInvariantError(
                f"{len(self.class_names)} class names vs num_classes={self.num_classes}"
            )
        if len(set(self.class_names)) != len(self.class_names):
            raise ManifestInvariantError("class names are not unique")
        seen = set()
        for rec in self.records:
            if not 0 <= rec.class_id < self.num_classes:
                raise ManifestInvariantError(f"class_id {rec.class_id} out of range")
            if rec.class_name != self.class_names[rec.class_id]:
                raise ManifestInvariantError(
                    f"record class_name {rec.class_name!r} does not index class_names"
                )
            seen.add(rec.class_id)
        if self.records and seen != set(range(self.num_classes)):
            missing = sorted(set(range(self.num_classes)) - seen)
            raise ManifestInvariantError(f"class ids are not dense, missing {missing[:10]}")

    def by_split(self, split: Split | str) -> list[ImageRecord]:
        split = Split(split)
        return [r for r in self.records if r.split == split]


@dataclass
class LoadIssue:
    error: str  # malformed_row | image_not_found | undecodable_image
    path: str | None = None
    line_no: int | None = None
    detail: str = ""


@dataclass
class LoadReport:
    issues: list[LoadIssue] = field(default_factory=list)

    def add(self, error: str, path: str | None = None, line_no: int | None = None,
            detail: str = "") -> None:
        self.issues.append(LoadIssue(error, path, line_no, detail))

    def write_jsonl(self, dest: Path | IO[str]) -> None:
        """One JSON object per issue: {"error": ..., "path": ..., ...}."""
        own = isinstance(dest, (str, Path))
        fp = open(dest, "w") if own else dest
        try:
            for issue in self.issues:
                line = {"error": issue.error, "path": issue.path}
                if issue.line_no is not None:
                    line["line_no"] = issue.line_no
                if issue.detail:
                    line["detail"] = issue.detail
                fp.write(json.dumps(line) + "\n")
        finally:
            if own:
                fp.close()


def _read_class_names(root: Path) -> list[str] | None:
    classes_file = root / "classes.txt"
    if not classes_file.exists():
        return None
    names = [line.rstrip("\n") for line in classes_file.read_text().splitlines()]
    return [n for n in names if n.strip()]


def load_manifest(
    root: Path | str,
    annotation_file: Path | str | None = None,
    source_tag: str = "",
) -> tuple[DatasetManifest, LoadReport]:
    """Parse the annotation CSV under ``root`` into a manifest.

    Every parseable row becomes a record. Rows that cannot be parsed and
    records whose image file is missing are collected into the returned
    LoadReport; missing images are still listed in the manifest so that
    nothing is silently dropped.
    """
    root = Path(root)
    ann_path = Path(annotation_file) if annotation_file else root / "annotations.csv"
    if not ann_path.exists():
        raise MissingAnnotationFile(str(ann_path))

    class_names = _read_class_names(root)
    report = LoadReport()
    rows: list[tuple[str, int, tuple[int, int, int, int]]] = []
    max_class_id = -1

    with open(ann_path, newline="") as fp:
        for line_no, row in enumerate(csv.reader(fp), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 6:
                report.add("malformed_row", line_no=line_no,
                           detail=f"expected 6 fields, got {len(row)}")
                continue
            rel_path = row[0].strip()
            try:
                class_id = int(row[1])
                x_min, y_min, x_max, y_max = (int(v) for v in row[2:6])
            except ValueError as exc:
                report.add("malformed_row", path=rel_path, line_no=line_no, detail=str(exc))
                continue
            if class_id < 0 or (class_names is not None and class_id >= len(class_names)):
                report.add("malformed_row", path=rel_path, line_no=line_no,
                           detail=f"class_id {class_id} outside class list")
                continue
            if not (0 <= x_min < x_max and 0 <= y_min < y_max):
                report.add("malformed_row", path=rel_path, line_no=line_no,
                           detail=f"degenerate bbox ({x_min},{y_min},{x_max},{y_max})")
                continue
            rows.append((rel_path, class_id, (x_min, y_min, x_max, y_max)))
            max_class_id = max(max_class_id, class_id)

    if not rows:
        manifest = DatasetManifest(records=[], num_classes=0, class_names=[],
                                   source_tag=source_tag)
        return manifest, report

    if class_names is None:
        class_names = [f"class_{i}" for i in range(max_class_id + 1)]

    records = []
    for rel_path, class_id, bbox in rows:
        abs_path = root / rel_path
        if not abs_path.exists():
            report.add("image_not_found", path=str(abs_path))
        records.append(ImageRecord(
            image_path=abs_path,
            class_id=class_id,
            class_name=class_names[class_id],
            bbox=bbox,
        ))

    manifest = DatasetManifest(records=records, num_classes=len(class_names),
                               class_names=list(class_names), source_tag=source_tag)
    manifest.validate()
    return manifest, report


def decode_image(path: Path | str) -> np.ndarray:
    """Decode to an RGB uint8 array of shape (H, W, 3)."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def crop_to_bbox(record: ImageRecord, image: np.ndarray) -> np.ndarray:
    """Crop ``image`` to the record's bbox.

    Output pixel (0, 0) equals input pixel (x_min, y_min); output size is
    (y_max - y_min, x_max - x_min). A bbox that exceeds the image extent
    raises BBoxOutOfBounds: clamping would silently change the label's
    geometry.
    """
    x_min, y_min, x_max, y_max = record.bbox
    height, width = image.shape[:2]
    if not (0 <= x_min < x_max <= width and 0 <= y_min < y_max <= height):
        raise BBoxOutOfBounds(
            f"bbox ({x_min},{y_min},{x_max},{y_max}) exceeds image {width}x{height}"
        )
    return image[y_min:y_max, x_min:x_max]


def dhash(image: np.ndarray | Image.Image, hash_size: int = 8) -> int:
    """Difference hash: 64-bit fingerprint of horizontal luminance gradients.

    The image is reduced to greyscale at (hash_size+1) x hash_size and each
    bit records whether a pixel is brighter than its right neighbor.
    """
    if isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    grey = image.convert("L").resize((hash_size + 1, hash_size), Image.Resampling.LANCZOS)
    pixels = np.asarray(grey, dtype=np.int16)
    bits = pixels[:, :-1] > pixels[:, 1:]
    value = 0
    for bit in bits.flatten():
        value = (value << 1) | int(bit)
    return value


def hamming_distance(a: int, b: int) -> int:
    return (a ^ b).bit_count()


def dedup_by_perceptual_hash(
    records: Sequence[ImageRecord],
    hash_size: int = 8,
    threshold: int = 10,
    report: LoadReport | None = None,
) -> tuple[list[ImageRecord], list[tuple[ImageRecord, ImageRecord]]]:
    """Greedy first-seen-wins dedup in manifest order.

    A record is dropped when its hash lies within ``threshold`` Hamming bits
    of an already-kept record; the kept record is returned alongside it.
    Undecodable images are kept (never silently dropped) and reported.
    """
    kept: list[ImageRecord] = []
    kept_hashes: list[int] = []
    dropped: list[tuple[ImageRecord, ImageRecord]] = []
    for record in records:
        try:
            image = decode_image(record.image_path)
        except Exception as exc:  # noqa: BLE001 - decode failures are data, not bugs
            if report is not None:
                report.add("undecodable_image", path=str(record.image_path), detail=str(exc))
            kept.append(record)
            kept_hashes.append(-1)  # sentinel never within threshold of a real hash
            continue
        h = dhash(image, hash_size)
        duplicate_of = None
        for kept_record, kept_hash in zip(kept, kept_hashes):
            if kept_hash >= 0 and hamming_distance(h, kept_hash) <= threshold:
                duplicate_of = kept_record
                break
        if duplicate_of is None:
            kept.append(record)
            kept_hashes.append(h)
        else:
            dropped.append((record, duplicate_of))
    return kept, dropped


def _apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment: sizes sum to n, each within 1 of exact."""
    exact = [n * r for r in ratios]
    sizes = [int(e) for e in exact]
    remainder = n - sum(sizes)
    by_frac = sorted(range(len(ratios)), key=lambda i: exact[i] - sizes[i], reverse=True)
    for i in by_frac[:remainder]:
        sizes[i] += 1
    return sizes


def stratified_split(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> DatasetManifest:
    """Assign train/val/test per class with largest-remainder proportions.

    Deterministic: per-class shuffles are keyed on (seed, class_id), so the
    assignment is independent of record order across classes. Raises
    ClassTooSmall when a class would leave any split empty.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")

    per_class: dict[int, list[int]] = {}
    for idx, rec in enumerate(manifest.records):
        per_class.setdefault(rec.class_id, []).append(idx)

    assignment: dict[int, Split] = {}
    for class_id, indices in sorted(per_class.items()):
        sizes = _apportion(len(indices), ratios)
        if min(sizes) == 0:
            raise ClassTooSmall(class_id, len(indices))
        rng = np.random.default_rng([seed, class_id])
        order = rng.permutation(len(indices))
        shuffled = [indices[i] for i in order]
        n_train, n_val, _ = sizes
        for i in shuffled[:n_train]:
            assignment[i] = Split.TRAIN
        for i in shuffled[n_train:n_train + n_val]:
            assignment[i] = Split.VAL
        for i in shuffled[n_train + n_val:]:
            assignment[i] = Split.TEST

    records = [replace(rec, split=assignment[i]) for i, rec in enumerate(manifest.records)]
    return DatasetManifest(records=records, num_classes=manifest.num_classes,
                           class_names=list(manifest.class_names),
                           source_tag=manifest.source_tag)


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    """Write a prepared manifest (7 columns, split included) plus classes.txt."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        for rec in manifest.records:
            writer.writerow([
                str(rec.image_path), rec.class_id, *rec.bbox,
                rec.split.value if rec.split else "",
            ])
    (path.parent / "classes.txt").write_text(
        "".join(name + "\n" for name in manifest.class_names)
    )


def load_prepared_manifest(path: Path | str, source_tag: str = "") -> DatasetManifest:
    """Read back a manifest written by save_manifest."""
    path = Path(path)
    class_names = _read_class_names(path.parent)
    if class_names is None:
        raise MissingAnnotationFile(str(path.parent / "classes.txt"))
    records = []
    with open(path, newline="") as fp:
        for row in csv.reader(fp):
            if not row:
                continue
            image_path, class_id = Path(row[0]), int(row[1])
            bbox = tuple(int(v) for v in row[2:6])
            split = Split(row[6]) if row[6] else None
            records.append(ImageRecord(
                image_path=image_path, class_id=class_id,
                class_name=class_names[class_id], bbox=bbox, split=split,
            ))
    manifest = DatasetManifest(records=records, num_classes=len(class_names),
                               class_names=class_names, source_tag=source_tag)
    manifest.validate()
    return manifest
