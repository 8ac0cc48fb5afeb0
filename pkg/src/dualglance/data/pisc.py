"""Pair-annotation ingestion and emission.

One text record per image (grammar in docs/formats.md):

    image <id> <width> <height>
    box <idx> <xmin> <ymin> <xmax> <ymax>
    occupation <idx> <name...>                     (preserved, unused)
    pair <i> <j> label <fine-label>
    pair <i> <j> votes <v1> <v2> <v3> <v4> <v5>
    cue <i> <j> <cue-name> <xmin> <ymin> <xmax> <ymax>   (synthetic ground truth)

Raw vote lists are resolved through majority voting at ingestion; records
without a strict plurality are dropped and counted as invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from ..geometry import Box
from ..vision import ImagePlane, horizontal_flip, read_image
from .labels import FINE_LABELS, NOT_SURE, VoteRecord, agreement_rate, majority_vote

__all__ = ["PairSample", "PairDataset", "ParseReport", "parse_pisc", "emit_annotations"]


@dataclass(frozen=True)
class PairSample:
    image_id: str
    b1: Box
    b2: Box
    label: str
    tag: str = "orig"  # provenance: orig | swap | flip | swap+flip
    cue_label: str | None = None
    cue_box: Box | None = None

    def __post_init__(self):
        if self.label not in FINE_LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.b1 == self.b2:
            raise ValueError(f"{self.image_id}: the two person boxes must differ")


class PairDataset:
    """Samples plus image access: from an image directory or an in-memory store."""

    def __init__(self, samples, dims, image_root=None, images=None):
        self.samples = list(samples)
        self.dims = dict(dims)  # image_id -> (width, height)
        self.image_root = Path(image_root) if image_root else None
        self.images = images  # image_id -> ImagePlane, for synthetic data
        self._cache: dict[str, ImagePlane] = {}

    def __len__(self):
        return len(self.samples)

    def class_counts(self) -> dict[str, int]:
        counts = {label: 0 for label in FINE_LABELS}
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def base_image(self, image_id: str) -> ImagePlane:
        if self.images is not None:
            return self.images[image_id]
        if image_id not in self._cache:
            if self.image_root is None:
                raise ValueError("dataset has no image source")
            for ext in (".dgi", ".png"):
                path = self.image_root / f"{image_id}{ext}"
                if path.exists():
                    self._cache[image_id] = read_image(path)
                    break
            else:
                raise FileNotFoundError(f"no image file for id {image_id} under {self.image_root}")
        return self._cache[image_id]

    def load_image(self, sample: PairSample) -> ImagePlane:
        """Decoded pixels for a sample; flipped provenance regenerates the
        mirrored plane here rather than storing duplicates."""
        img = self.base_image(sample.image_id)
        if "flip" in sample.tag:
            img = horizontal_flip(img)
        return img

    def subset(self, samples) -> "PairDataset":
        ds = PairDataset(samples, self.dims, self.image_root, self.images)
        ds._cache = self._cache
        return ds


@dataclass
class ParseReport:
    n_images: int = 0
    n_samples: int = 0
    n_invalid_votes: int = 0
    class_counts: dict = field(default_factory=dict)
    agreement_rate: float | None = None
    errors: list = field(default_factory=list)
    missing_images: list = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"images: {self.n_images}", f"valid samples: {self.n_samples}",
                 f"invalid vote records: {self.n_invalid_votes}"]
        for label in FINE_LABELS:
            lines.append(f"  {label}: {self.class_counts.get(label, 0)}")
        if self.agreement_rate is not None:
            lines.append(f"agreement rate: {self.agreement_rate:.4f}")
        if self.missing_images:
            lines.append(f"missing image files: {len(self.missing_images)}")
        return "\n".join(lines)


def parse_pisc(annotation_path, image_root=None) -> tuple[PairDataset, ParseReport]:
    """Parse and validate an annotation file. Malformed lines are collected
    with their line numbers; a malformed record never aborts the rest."""
    report = ParseReport()
    samples: list[PairSample] = []
    dims: dict[str, tuple[int, int]] = {}
    boxes: dict[int, Box] = {}
    cues: dict[tuple[int, int], tuple[str, Box]] = {}
    pending: list[tuple[int, int, int, str | VoteRecord]] = []
    image_id = None
    vote_records: list[VoteRecord] = []

    def flush():
        nonlocal pending, boxes, cues
        for lineno, i, j, payload in pending:
            if isinstance(payload, VoteRecord):
                vote_records.append(payload)
                label = majority_vote(payload)
                if label is None:
                    report.n_invalid_votes += 1
                    continue
            else:
                label = payload
            if i not in boxes or j not in boxes:
                report.errors.append((lineno, f"pair ({i},{j}) references unknown box index"))
                continue
            try:
                cue_label, cue_box = cues.get((i, j), (None, None))
                samples.append(PairSample(image_id, boxes[i], boxes[j], label,
                                          cue_label=cue_label, cue_box=cue_box))
            except ValueError as e:
                report.errors.append((lineno, str(e)))
        pending, boxes, cues = [], {}, {}

    with open(annotation_path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "image":
                    flush()
                    image_id = parts[1]
                    dims[image_id] = (int(parts[2]), int(parts[3]))
                    report.n_images += 1
                elif parts[0] == "box":
                    boxes[int(parts[1])] = Box(*(float(v) for v in parts[2:6]))
                elif parts[0] == "occupation":
                    pass  # preserved in the file, unused downstream
                elif parts[0] == "pair":
                    i, j = int(parts[1]), int(parts[2])
                    if parts[3] == "label":
                        if parts[4] not in FINE_LABELS:
                            raise ValueError(f"unknown label {parts[4]!r}")
                        pending.append((lineno, i, j, parts[4]))
                    elif parts[3] == "votes":
                        rec = VoteRecord(f"{image_id}:{i}-{j}", tuple(parts[4:9]))
                        pending.append((lineno, i, j, rec))
                    else:
                        raise ValueError(f"expected 'label' or 'votes', got {parts[3]!r}")
                elif parts[0] == "cue":
                    i, j = int(parts[1]), int(parts[2])
                    cues[(i, j)] = (parts[3], Box(*(float(v) for v in parts[4:8])))
                else:
                    raise ValueError(f"unknown record type {parts[0]!r}")
            except (ValueError, IndexError) as e:
                report.errors.append((lineno, str(e)))
        flush()

    dataset = PairDataset(samples, dims, image_root=image_root)
    if image_root is not None:
        root = Path(image_root)
        seen = {s.image_id for s in samples}
        for iid in sorted(seen):
            if not any((root / f"{iid}{ext}").exists() for ext in (".dgi", ".png")):
                report.missing_images.append(iid)
    report.n_samples = len(samples)
    report.class_counts = dataset.class_counts()
    valid_votes = [r for r in vote_records if majority_vote(r) is not None]
    if valid_votes:
        report.agreement_rate = agreement_rate(valid_votes)
    return dataset, report


def emit_annotations(path, dataset: PairDataset) -> None:
    """Inverse of parse_pisc for resolved-label datasets."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_image: dict[str, list[PairSample]] = {}
    for s in dataset.samples:
        by_image.setdefault(s.image_id, []).append(s)
    with open(path, "w") as fh:
        for image_id in by_image:
            w, h = dataset.dims[image_id]
            fh.write(f"image {image_id} {w} {h}\n")
            box_ids: dict[Box, int] = {}
            for s in by_image[image_id]:
                for b in (s.b1, s.b2):
                    if b not in box_ids:
                        box_ids[b] = len(box_ids)
            for b, idx in box_ids.items():
                fh.write(f"box {idx} {b.xmin:.2f} {b.ymin:.2f} {b.xmax:.2f} {b.ymax:.2f}\n")
            for s in by_image[image_id]:
                i, j = box_ids[s.b1], box_ids[s.b2]
                fh.write(f"pair {i} {j} label {s.label}\n")
                if s.cue_box is not None:
                    c = s.cue_box
                    fh.write(f"cue {i} {j} {s.cue_label} "
                             f"{c.xmin:.2f} {c.ymin:.2f} {c.xmax:.2f} {c.ymax:.2f}\n")
