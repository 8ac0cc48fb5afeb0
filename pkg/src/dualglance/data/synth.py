"""Synthetic contextual-cue scenes for desk-scale verification.

Each scene holds two person glyphs (torso + head) whose relationship label
is a deterministic function of torso colors, relative heights, and the
horizontal gap -- except for the label pairs that share an identical pair
appearance and are decidable ONLY through a cue object planted outside the
pair's union box. That construction pins the pair-only accuracy ceiling
below 100% and leaves the remaining headroom to context.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..geometry import Box, Proposal, union_box, write_proposal_file
from ..vision import ImagePlane, write_raw_image
from .labels import FINE_LABELS
from .pisc import PairDataset, PairSample, emit_annotations

__all__ = ["ClassRule", "CueShape", "SyntheticSceneSpec", "synth_generate", "write_synth_dataset"]

PALETTE = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.15, 0.20, 0.80),
    "gray": (0.45, 0.45, 0.45),
}

SKIN = (0.92, 0.76, 0.60)


@dataclass(frozen=True)
class CueShape:
    color: tuple[float, float, float]
    width: int
    height: int


@dataclass(frozen=True)
class ClassRule:
    """Pair appearance for one label: torso colors (None = independent random
    draws), whether one glyph is child-sized, the horizontal gap range, and
    an optional cue object that disambiguates the label."""

    colors: tuple[str, str] | None
    gap: tuple[int, int]
    child: bool = False
    cue: str | None = None


def _default_rules():
    return {
        "friends": ClassRule(colors=("red", "red"), gap=(3, 6)),
        "family": ClassRule(colors=("green", "green"), gap=(3, 6), child=True),
        "couple": ClassRule(colors=("blue", "blue"), gap=(0, 1)),
        "professional": ClassRule(colors=("gray", "gray"), gap=(4, 7), cue="case"),
        "commercial": ClassRule(colors=("gray", "gray"), gap=(4, 7), cue="cart"),
        "no-relation": ClassRule(colors=None, gap=(13, 18)),
    }


def _default_cues():
    return {
        "case": CueShape(color=(0.05, 0.05, 0.35), width=6, height=5),
        "cart": CueShape(color=(0.95, 0.80, 0.10), width=6, height=5),
    }


@dataclass(frozen=True)
class SyntheticSceneSpec:
    canvas: int = 32
    torso_width: int = 5
    adult_height: tuple[int, int] = (9, 11)
    child_height: tuple[int, int] = (5, 6)
    head: int = 3
    rules: dict = field(default_factory=_default_rules)
    cues: dict = field(default_factory=_default_cues)
    neutral_prob: float = 0.5
    neutral_color: tuple[float, float, float] = (0.45, 0.30, 0.15)
    jitter_px: int = 2
    n_cue_jitter: int = 2
    n_background: int = 4
    seed: int = 0

    def __post_init__(self):
        missing = [lbl for lbl in FINE_LABELS if lbl not in self.rules]
        if missing:
            raise ValueError(f"rules missing for labels {missing}")
        # labels sharing a pair-appearance signature are undecidable from the
        # pair alone; each needs its own planted cue
        groups: dict[tuple, list[str]] = {}
        for label in FINE_LABELS:
            r = self.rules[label]
            groups.setdefault((r.colors, r.child, r.gap), []).append(label)
        for sig, labels in groups.items():
            if len(labels) < 2:
                continue
            cues = [self.rules[lbl].cue for lbl in labels]
            if None in cues or len(set(cues)) != len(cues):
                raise ValueError(
                    f"labels {labels} share pair appearance {sig} and need distinct cues, got {cues}")
            for lbl in labels:
                if self.rules[lbl].cue not in self.cues:
                    raise ValueError(f"label {lbl} maps to unknown cue {self.rules[lbl].cue!r}")

    def cue_dependent_labels(self) -> tuple[str, ...]:
        groups: dict[tuple, list[str]] = {}
        for label in FINE_LABELS:
            r = self.rules[label]
            groups.setdefault((r.colors, r.child, r.gap), []).append(label)
        out = [lbl for labels in groups.values() if len(labels) > 1 for lbl in labels]
        return tuple(sorted(out))

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jitter_color(rng, color, mag=0.04):
    return tuple(np.clip(np.asarray(color) + rng.uniform(-mag, mag, 3), 0.02, 0.98))


def _draw_rect(canvas, box: Box, color):
    canvas[int(box.ymin):int(box.ymax), int(box.xmin):int(box.xmax)] = color


def _disjoint(a: Box, b: Box) -> bool:
    return a.xmax <= b.xmin or b.xmax <= a.xmin or a.ymax <= b.ymin or b.ymax <= a.ymin


def _place_box(rng, spec, w, h, keep_out, tries=200) -> Box | None:
    for _ in range(tries):
        x0 = int(rng.integers(1, spec.canvas - w))
        y0 = int(rng.integers(1, spec.canvas - h))
        box = Box(x0, y0, x0 + w, y0 + h)
        if all(_disjoint(box, other) for other in keep_out):
            return box
    return None


def _render_glyph(canvas, rng, x, y_base, torso_h, torso_color, torso_w, head):
    torso = Box(x, y_base - torso_h, x + torso_w, y_base)
    hx = x + (torso_w - head) // 2
    head_box = Box(hx, y_base - torso_h - head, hx + head, y_base - torso_h)
    _draw_rect(canvas, torso, _jitter_color(rng, torso_color))
    _draw_rect(canvas, head_box, _jitter_color(rng, SKIN))
    return Box(x, head_box.ymin, x + torso_w, y_base)


def _jittered_box(rng, spec, box: Box) -> Box:
    j = spec.jitter_px
    x0 = np.clip(box.xmin + rng.integers(-j, j + 1), 0, spec.canvas - 2)
    y0 = np.clip(box.ymin + rng.integers(-j, j + 1), 0, spec.canvas - 2)
    x1 = np.clip(box.xmax + rng.integers(-j, j + 1), x0 + 1, spec.canvas)
    y1 = np.clip(box.ymax + rng.integers(-j, j + 1), y0 + 1, spec.canvas)
    return Box(float(x0), float(y0), float(x1), float(y1))


def _render_scene(spec: SyntheticSceneSpec, label: str, rng):
    rule = spec.rules[label]
    canvas = np.empty((spec.canvas, spec.canvas, 3), dtype=np.float64)
    canvas[:] = _jitter_color(rng, (0.82, 0.82, 0.82), mag=0.03)
    canvas += rng.uniform(-0.015, 0.015, canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0)

    names = list(PALETTE)
    if rule.colors is None:
        colors = (PALETTE[names[rng.integers(len(names))]],
                  PALETTE[names[rng.integers(len(names))]])
    else:
        colors = (PALETTE[rule.colors[0]], PALETTE[rule.colors[1]])
    h1 = int(rng.integers(*spec.adult_height))
    if rule.child:
        h2 = int(rng.integers(*spec.child_height))
    elif rule.colors is None and rng.uniform() < 0.5:
        h2 = int(rng.integers(*spec.child_height))
    else:
        h2 = int(rng.integers(*spec.adult_height))
    gap = int(rng.integers(rule.gap[0], rule.gap[1] + 1))

    total_w = 2 * spec.torso_width + gap
    max_h = max(h1, h2) + spec.head
    x0 = int(rng.integers(1, spec.canvas - 1 - total_w))
    y_base = int(rng.integers(max_h + 1, spec.canvas - 1))
    if rng.uniform() < 0.5:  # which side the taller glyph stands on
        h1, h2 = h2, h1
        colors = (colors[1], colors[0])
    b1 = _render_glyph(canvas, rng, x0, y_base, h1, colors[0], spec.torso_width, spec.head)
    b2 = _render_glyph(canvas, rng, x0 + spec.torso_width + gap, y_base, h2,
                       colors[1], spec.torso_width, spec.head)
    pair_union = union_box(b1, b2)
    keep_out = [pair_union, b1, b2]

    cue_box = None
    if rule.cue is not None:
        shape = spec.cues[rule.cue]
        cue_box = _place_box(rng, spec, shape.width, shape.height, keep_out)
        if cue_box is None:
            raise ValueError(
                f"spec leaves no room to plant cue {rule.cue!r} outside the union box")
        _draw_rect(canvas, cue_box, _jitter_color(rng, shape.color))
        keep_out.append(cue_box)

    neutral_box = None
    if rng.uniform() < spec.neutral_prob:
        neutral_box = _place_box(rng, spec, 4, 4, keep_out, tries=50)
        if neutral_box is not None:
            _draw_rect(canvas, neutral_box, _jitter_color(rng, spec.neutral_color))

    proposals = [Proposal(b1, float(rng.uniform(0.80, 0.95))),
                 Proposal(b2, float(rng.uniform(0.80, 0.95)))]
    if cue_box is not None:
        proposals.append(Proposal(cue_box, float(rng.uniform(0.70, 0.90))))
        for _ in range(spec.n_cue_jitter):
            proposals.append(Proposal(_jittered_box(rng, spec, cue_box),
                                      float(rng.uniform(0.45, 0.70))))
    if neutral_box is not None:
        proposals.append(Proposal(neutral_box, float(rng.uniform(0.45, 0.75))))
        proposals.append(Proposal(_jittered_box(rng, spec, neutral_box),
                                  float(rng.uniform(0.30, 0.60))))
    for _ in range(spec.n_background):
        w = int(rng.integers(4, 11))
        h = int(rng.integers(4, 11))
        bx = int(rng.integers(0, spec.canvas - w))
        by = int(rng.integers(0, spec.canvas - h))
        proposals.append(Proposal(Box(bx, by, bx + w, by + h), float(rng.uniform(0.05, 0.40))))

    image = ImagePlane(canvas.astype(np.float32))
    return image, b1, b2, proposals, rule.cue, cue_box


def _balanced_labels(n, rng):
    reps = [FINE_LABELS[i % len(FINE_LABELS)] for i in range(n)]
    return [reps[i] for i in rng.permutation(n)]


def synth_generate(spec: SyntheticSceneSpec, n_train: int, n_test: int, seed: int | None = None):
    """Deterministic scene generation.

    Returns (train PairDataset, test PairDataset, proposals dict). Class
    balance within each split is uniform up to one sample.
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, spec.canvas, n_train, n_test])
    proposals: dict[str, list[Proposal]] = {}
    splits = {}
    for split, n in (("train", n_train), ("test", n_test)):
        samples = []
        dims = {}
        images = {}
        for idx, label in enumerate(_balanced_labels(n, rng)):
            image_id = f"{split}{idx:06d}"
            image, b1, b2, props, cue_label, cue_box = _render_scene(spec, label, rng)
            images[image_id] = image
            dims[image_id] = (spec.canvas, spec.canvas)
            proposals[image_id] = props
            samples.append(PairSample(image_id, b1, b2, label,
                                      cue_label=cue_label, cue_box=cue_box))
        splits[split] = PairDataset(samples, dims, images=images)
    return splits["train"], splits["test"], proposals


def write_synth_dataset(out_dir, spec, train: PairDataset, test: PairDataset,
                        proposals, seed: int) -> list[Path]:
    """Persist images (raw tensor files), annotations, proposals, and a
    manifest carrying the seed and spec hash."""
    out = Path(out_dir)
    written = []
    for ds, name in ((train, "train"), (test, "test")):
        ann = out / f"{name}.annotations.txt"
        emit_annotations(ann, ds)
        written.append(ann)
        for image_id, image in ds.images.items():
            p = out / "images" / f"{image_id}.dgi"
            write_raw_image(p, image)
            written.append(p)
    pfile = out / "proposals.txt"
    write_proposal_file(pfile, proposals)
    written.append(pfile)
    manifest = out / "dataset.manifest"
    with open(manifest, "w") as fh:
        fh.write(f"seed {seed}\nspec {spec.spec_hash()}\n")
        for p in written:
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            fh.write(f"{digest}  {p.relative_to(out)}\n")
    written.append(manifest)
    return written
