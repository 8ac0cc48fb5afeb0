"""Boxes, IoU, NMS, relative-geometry features, and contextual-region selection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Box",
    "Proposal",
    "GeometryFeature",
    "NormalizerStats",
    "iou",
    "union_box",
    "geometry_feature",
    "fit_normalizer",
    "apply_normalizer",
    "nms",
    "nms_indices",
    "select_context_regions",
    "select_context_indices",
    "read_proposal_file",
    "write_proposal_file",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous pixel coordinates."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        vals = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(np.isfinite(vals)):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.xmin >= self.xmax or self.ymin >= self.ymax:
            raise ValueError(f"degenerate box {vals}: needs xmin < xmax and ymin < ymax")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def clip(self, width: float, height: float) -> "Box":
        """Intersection with the image plane; raises if fully outside."""
        x0, y0 = max(self.xmin, 0.0), max(self.ymin, 0.0)
        x1, y1 = min(self.xmax, width), min(self.ymax, height)
        if x0 >= x1 or y0 >= y1:
            raise ValueError(f"box {self} lies outside a {width}x{height} image")
        return Box(x0, y0, x1, y1)


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float

    def __post_init__(self):
        if not (0.0 <= self.objectness <= 1.0):
            raise ValueError(f"objectness must be in [0,1], got {self.objectness}")


# 5-vector of image-relative box coordinates plus relative area
GeometryFeature = np.ndarray


@dataclass(frozen=True)
class NormalizerStats:
    """Per-component mean/std of geometry features, fitted on a training set."""

    mean: np.ndarray
    std: np.ndarray


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 when interiors are disjoint."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def union_box(b1: Box, b2: Box) -> Box:
    """Smallest axis-aligned box covering both inputs."""
    return Box(min(b1.xmin, b2.xmin), min(b1.ymin, b2.ymin),
               max(b1.xmax, b2.xmax), max(b1.ymax, b2.ymax))


def geometry_feature(b: Box, image_width: float, image_height: float) -> GeometryFeature:
    """Raw 5-vector (xmin, ymin, xmax, ymax, area) in image-relative units."""
    if image_width <= 0 or image_height <= 0:
        raise ValueError(f"image extents must be positive, got {image_width}x{image_height}")
    rel = np.array([
        b.xmin / image_width,
        b.ymin / image_height,
        b.xmax / image_width,
        b.ymax / image_height,
        0.0,
    ])
    rel[4] = (rel[2] - rel[0]) * (rel[3] - rel[1])
    return rel


def fit_normalizer(features) -> NormalizerStats:
    """Fit per-component zero-mean/unit-variance stats over the training set."""
    mat = np.asarray(list(features), dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2 or mat.shape[1] != 5:
        raise ValueError(f"need >=2 geometry features of width 5, got array of shape {mat.shape}")
    mean = mat.mean(axis=0)
    std = mat.std(axis=0)
    dead = np.nonzero(std <= 0)[0]
    if dead.size:
        raise ValueError(f"zero-variance geometry component(s) {dead.tolist()}; cannot standardize")
    return NormalizerStats(mean=mean, std=std)


def apply_normalizer(stats: NormalizerStats, feature: GeometryFeature) -> np.ndarray:
    return (np.asarray(feature, dtype=np.float64) - stats.mean) / stats.std


def nms_indices(proposals, iou_threshold: float) -> list[int]:
    """Indices surviving greedy suppression by descending objectness; ties
    keep input order. Survivors overlap each other at most iou_threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0,1], got {iou_threshold}")
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].objectness, i))
    kept: list[int] = []
    for i in order:
        if all(iou(proposals[i].box, proposals[j].box) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def nms(proposals, iou_threshold: float):
    return [proposals[i] for i in nms_indices(proposals, iou_threshold)]


def select_context_indices(proposals, b1: Box, b2: Box, tau_u: float, m: int) -> list[int]:
    """Indices of the contextual bag: proposals whose worst-case IoU against
    either person box stays strictly below tau_u, truncated to the m
    highest-objectness survivors (ties by input order). May be empty."""
    if not 0.0 < tau_u <= 1.0:
        raise ValueError(f"tau_u must be in (0,1], got {tau_u}")
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")
    survivors = [i for i, p in enumerate(proposals)
                 if max(iou(p.box, b1), iou(p.box, b2)) < tau_u]
    survivors.sort(key=lambda i: (-proposals[i].objectness, i))
    return survivors[:m]


def select_context_regions(proposals, b1: Box, b2: Box, tau_u: float, m: int):
    return [proposals[i] for i in select_context_indices(proposals, b1, b2, tau_u, m)]


# ---------------------------------------------------------------------------
# proposal files: one record per image (see docs/formats.md)


def write_proposal_file(path, records: dict[str, list[Proposal]]) -> None:
    """records: image id -> proposal list. Text format:

        image <id> <count>
        <xmin> <ymin> <xmax> <ymax> <objectness>   (count rows)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for image_id in records:
            plist = records[image_id]
            fh.write(f"image {image_id} {len(plist)}\n")
            for p in plist:
                b = p.box
                fh.write(f"{b.xmin:.4f} {b.ymin:.4f} {b.xmax:.4f} {b.ymax:.4f} {p.objectness:.6f}\n")


def read_proposal_file(path) -> dict[str, list[Proposal]]:
    records: dict[str, list[Proposal]] = {}
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "image" or len(head) != 3:
            raise ValueError(f"{path}: line {i + 1}: expected 'image <id> <count>', got {lines[i]!r}")
        image_id, count = head[1], int(head[2])
        plist = []
        for row in lines[i + 1:i + 1 + count]:
            x0, y0, x1, y1, score = (float(v) for v in row.split())
            plist.append(Proposal(Box(x0, y0, x1, y1), score))
        if len(plist) != count:
            raise ValueError(f"{path}: truncated record for image {image_id}")
        records[image_id] = plist
        i += 1 + count
    return records
