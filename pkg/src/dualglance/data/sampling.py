"""Oversampling by pair reversal / horizontal flip, per-batch stratified
sampling, and image-disjoint train/test splitting."""

from __future__ import annotations

import numpy as np

from ..geometry import Box
from .pisc import PairDataset, PairSample

__all__ = ["oversample", "stratified_batches", "split_dataset"]

_AUG_TAGS = ("swap", "flip", "swap+flip")


def _mirror_box(b: Box, width: float) -> Box:
    return Box(width - b.xmax, b.ymin, width - b.xmin, b.ymax)


def _augment(sample: PairSample, tag: str, width: float) -> PairSample:
    b1, b2 = sample.b1, sample.b2
    cue = sample.cue_box
    if "flip" in tag:
        b1, b2 = _mirror_box(b1, width), _mirror_box(b2, width)
        cue = _mirror_box(cue, width) if cue else None
    if "swap" in tag:
        b1, b2 = b2, b1
    return PairSample(sample.image_id, b1, b2, sample.label, tag=tag,
                      cue_label=sample.cue_label, cue_box=cue)


def oversample(dataset: PairDataset, target_counts: dict[str, int]) -> PairDataset:
    """Grow minority classes to their targets by pair reversal and horizontal
    flip, cycling swap -> flip -> swap+flip rounds over the class originals.
    Classes already at target are untouched; provenance stays on each tag."""
    counts = dataset.class_counts()
    for label, target in target_counts.items():
        if target < counts.get(label, 0):
            raise ValueError(f"target {target} for {label!r} is below the current "
                             f"count {counts[label]}; undersampling happens per batch")
    out = list(dataset.samples)
    by_class: dict[str, list[PairSample]] = {}
    for s in dataset.samples:
        by_class.setdefault(s.label, []).append(s)
    for label, target in target_counts.items():
        need = target - counts.get(label, 0)
        if need <= 0:
            continue
        originals = by_class.get(label)
        if not originals:
            raise ValueError(f"cannot oversample class {label!r}: no samples at all")
        produced = 0
        round_no = 0
        while produced < need:
            tag = _AUG_TAGS[round_no % len(_AUG_TAGS)]
            for s in originals:
                if produced >= need:
                    break
                width = dataset.dims[s.image_id][0]
                out.append(_augment(s, tag, width))
                produced += 1
            round_no += 1
    return dataset.subset(out)


def stratified_batches(samples, batch_size: int, seed: int, classes, num_batches=None):
    """Deterministic stream of class-balanced batches.

    Per-class counts inside one batch differ by at most one; when batch_size
    is not divisible by the class count, the remainder slots rotate across
    classes from batch to batch. Majority classes are effectively
    undersampled per batch; each class queue reshuffles independently when
    exhausted.
    """
    classes = list(classes)
    pools: dict[str, list] = {c: [] for c in classes}
    for s in samples:
        if s.label in pools:
            pools[s.label].append(s)
    empty = [c for c in classes if not pools[c]]
    if empty:
        raise ValueError(f"no samples for class(es) {empty}")
    if num_batches is None:
        num_batches = int(np.ceil(len(samples) / batch_size))
    seed_seq = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    rng = np.random.default_rng(seed_seq + [len(classes), batch_size])
    queues = {c: list(rng.permutation(len(pools[c]))) for c in classes}

    def draw(c):
        if not queues[c]:
            queues[c] = list(rng.permutation(len(pools[c])))
        return pools[c][queues[c].pop()]

    base, rem = divmod(batch_size, len(classes))
    batches = []
    for t in range(num_batches):
        batch = []
        for j, c in enumerate(classes):
            extra = 1 if (j - t) % len(classes) < rem else 0
            for _ in range(base + extra):
                batch.append(draw(c))
        order = rng.permutation(len(batch))
        batches.append([batch[i] for i in order])
    return batches


def split_dataset(dataset: PairDataset, test_fraction: float = 0.0,
                  per_class_test: int | None = None, seed: int = 0):
    """Split by image id, so no image straddles the two sides.

    per_class_test targets near-equal per-class test counts (the 6-class
    protocol); otherwise test_fraction of the images is held out. An
    infeasible per-class target raises with the shortfall per class.
    """
    by_image: dict[str, list[PairSample]] = {}
    for s in dataset.samples:
        by_image.setdefault(s.image_id, []).append(s)
    ids = sorted(by_image)
    rng = np.random.default_rng([seed, len(ids)])
    order = [ids[i] for i in rng.permutation(len(ids))]

    test_ids: set[str] = set()
    if per_class_test is not None:
        want = {label: per_class_test for label in dataset.class_counts()}
        got = {label: 0 for label in want}
        for iid in order:
            needs = [s.label for s in by_image[iid] if got[s.label] < want[s.label]]
            if needs:
                test_ids.add(iid)
                for s in by_image[iid]:
                    got[s.label] += 1
            if all(got[c] >= want[c] for c in want if want[c] > 0):
                break
        shortfall = {c: want[c] - got[c] for c in want if got[c] < want[c] and want[c] > 0}
        if shortfall:
            raise ValueError(f"per-class test target infeasible; shortfall: {shortfall}")
    else:
        n_test = round(test_fraction * len(ids))
        test_ids = set(order[:n_test])

    train = [s for s in dataset.samples if s.image_id not in test_ids]
    test = [s for s in dataset.samples if s.image_id in test_ids]
    return dataset.subset(train), dataset.subset(test)
