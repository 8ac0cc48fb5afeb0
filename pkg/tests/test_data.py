import itertools

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from dualglance.data import (
    FINE_LABELS,
    NOT_SURE,
    PairDataset,
    PairSample,
    SyntheticSceneSpec,
    VoteRecord,
    agreement_rate,
    emit_annotations,
    fine_to_coarse,
    label_index,
    majority_vote,
    oversample,
    parse_pisc,
    split_dataset,
    stratified_batches,
    synth_generate,
)
from dualglance.data.synth import ClassRule, _default_rules
from dualglance.geometry import Box, iou, union_box


def rec(*votes):
    return VoteRecord("s", tuple(votes))


class TestHierarchy:
    def test_mapping(self):
        assert fine_to_coarse("couple") == "intimate"
        assert fine_to_coarse("commercial") == "non-intimate"
        assert fine_to_coarse("no-relation") == "no-relation"
        assert fine_to_coarse("friends") == "intimate"
        assert fine_to_coarse("professional") == "non-intimate"

    def test_total_and_rejecting(self):
        for fine in FINE_LABELS:
            assert fine_to_coarse(fine) in ("intimate", "non-intimate", "no-relation")
        with pytest.raises(ValueError):
            fine_to_coarse("enemies")

    def test_label_index(self):
        assert label_index("friends", 6) == 0
        assert label_index("friends", 3) == 0
        assert label_index("professional", 3) == 1
        assert label_index("no-relation", 3) == 2


class TestMajorityVote:
    def test_plurality_wins(self):
        assert majority_vote(rec("friends", "friends", "family", "couple", "friends")) == "friends"

    def test_two_two_one_invalid(self):
        assert majority_vote(rec("friends", "friends", "family", "family", "couple")) is None

    def test_unanimous(self):
        for label in FINE_LABELS:
            assert majority_vote(rec(*[label] * 5)) == label

    def test_not_sure_never_wins(self):
        assert majority_vote(rec(NOT_SURE, NOT_SURE, NOT_SURE, "friends", "family")) is None

    def test_not_sure_does_not_block_a_strict_majority(self):
        assert majority_vote(rec("family", "family", "family", NOT_SURE, NOT_SURE)) == "family"

    def test_permutation_invariance(self):
        votes = ("friends", "family", "friends", NOT_SURE, "friends")
        results = {majority_vote(rec(*p)) for p in itertools.permutations(votes)}
        assert results == {"friends"}

    def test_wrong_count_rejected(self):
        with pytest.raises(ValueError):
            rec("friends", "friends", "friends")

    def test_two_one_one_one_has_no_majority(self):
        assert majority_vote(rec("friends", "friends", "family", "couple", "professional")) is None

    def test_exhaustive_multisets_match_counting_oracle(self):
        # all 5-vote multisets over 4 labels + not-sure, against an
        # independently phrased counting rule: a winner holds >= 3 votes
        # and is not the not-sure placeholder
        values = ("friends", "family", "couple", "professional", NOT_SURE)
        n_checked = 0
        for combo in itertools.combinations_with_replacement(values, 5):
            got = majority_vote(rec(*combo))
            majority = [v for v in set(combo) if sum(1 for x in combo if x == v) >= 3]
            expected = majority[0] if majority and majority[0] != NOT_SURE else None
            assert got == expected, combo
            n_checked += 1
        assert n_checked == 126  # C(9,5) multisets


class TestAgreementRate:
    def test_unanimous_is_one(self):
        assert agreement_rate([rec(*["couple"] * 5)] * 3) == 1.0

    def test_three_two_record(self):
        assert agreement_rate([rec("friends", "friends", "friends", "family", "family")]) == 0.6

    def test_two_records(self):
        records = [rec("friends", "friends", "friends", "family", "family"),
                   rec("couple", "couple", "couple", "couple", "professional")]
        assert agreement_rate(records) == pytest.approx(0.7)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            agreement_rate([])

    def test_invalid_record_rejected(self):
        with pytest.raises(ValueError, match="majority"):
            agreement_rate([rec("friends", "friends", "family", "family", "couple")])

    def test_range_over_exhaustive_valid_records(self):
        values = FINE_LABELS + (NOT_SURE,)
        for combo in itertools.combinations_with_replacement(values, 5):
            record = rec(*combo)
            if majority_vote(record) is None:
                continue
            rate = agreement_rate([record])
            assert 3 / 5 <= rate <= 1.0


def tiny_dataset():
    samples = [
        PairSample("im0", Box(0, 0, 4, 8), Box(10, 0, 14, 8), "friends"),
        PairSample("im0", Box(0, 0, 4, 8), Box(20, 0, 24, 8), "no-relation"),
        PairSample("im1", Box(2, 2, 6, 10), Box(9, 2, 13, 10), "couple",
                   cue_label="case", cue_box=Box(20, 20, 26, 25)),
    ]
    dims = {"im0": (32, 32), "im1": (32, 32)}
    return PairDataset(samples, dims)


class TestAnnotationsIO:
    def test_round_trip(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "ann.txt"
        emit_annotations(path, ds)
        back, report = parse_pisc(path)
        assert not report.errors
        assert len(back.samples) == len(ds.samples)
        for a, b in zip(sorted(ds.samples, key=str), sorted(back.samples, key=str)):
            assert (a.image_id, a.label, a.b1, a.b2, a.cue_label, a.cue_box) == \
                   (b.image_id, b.label, b.b1, b.b2, b.cue_label, b.cue_box)
        assert back.dims == ds.dims

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("")
        ds, report = parse_pisc(path)
        assert len(ds.samples) == 0
        assert report.n_images == 0
        assert all(v == 0 for v in report.class_counts.values())

    def test_malformed_lines_reported_with_numbers(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text(
            "image im0 32 32\n"
            "box 0 0 0 4 8\n"
            "box 1 10 0 14 8\n"
            "pair 0 1 label martians\n"
            "pair 0 1 label friends\n"
            "box 2 5 5 5 5\n"
        )
        ds, report = parse_pisc(path)
        assert len(ds.samples) == 1
        linenos = [ln for ln, _ in report.errors]
        assert 4 in linenos  # unknown label
        assert 6 in linenos  # degenerate box

    def test_votes_resolved_and_invalid_counted(self, tmp_path):
        path = tmp_path / "votes.txt"
        path.write_text(
            "image im0 32 32\n"
            "box 0 0 0 4 8\n"
            "box 1 10 0 14 8\n"
            "pair 0 1 votes friends friends friends family family\n"
            "image im1 32 32\n"
            "box 0 0 0 4 8\n"
            "box 1 10 0 14 8\n"
            "pair 0 1 votes friends friends family family couple\n"
        )
        ds, report = parse_pisc(path)
        assert [s.label for s in ds.samples] == ["friends"]
        assert report.n_invalid_votes == 1
        assert report.agreement_rate == pytest.approx(0.6)

    def test_missing_images_flagged(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "ann.txt"
        emit_annotations(path, ds)
        _, report = parse_pisc(path, image_root=tmp_path)
        assert set(report.missing_images) == {"im0", "im1"}


class TestSynthGenerate:
    def test_same_seed_bit_identical(self):
        spec = SyntheticSceneSpec()
        a_train, a_test, a_props = synth_generate(spec, 24, 12, seed=7)
        b_train, b_test, b_props = synth_generate(spec, 24, 12, seed=7)
        assert a_train.samples == b_train.samples
        assert a_props == b_props
        for iid in a_train.images:
            assert a_train.images[iid].pixels.tobytes() == b_train.images[iid].pixels.tobytes()

    def test_different_seed_differs(self):
        spec = SyntheticSceneSpec()
        a, _, _ = synth_generate(spec, 12, 6, seed=1)
        b, _, _ = synth_generate(spec, 12, 6, seed=2)
        assert any(x != y for x, y in zip(a.samples, b.samples))

    def test_class_balance_within_one(self):
        _, test, _ = synth_generate(SyntheticSceneSpec(), 25, 13, seed=3)
        counts = test.class_counts()
        assert max(counts.values()) - min(counts.values()) <= 1
        assert sum(counts.values()) == 13

    def test_cue_planted_outside_union_box(self):
        train, _, props = synth_generate(SyntheticSceneSpec(), 60, 6, seed=4)
        cued = [s for s in train.samples if s.cue_box is not None]
        assert cued, "cue-dependent classes must plant cues"
        for s in cued:
            assert s.label in ("professional", "commercial")
            u = union_box(s.b1, s.b2)
            assert iou(s.cue_box, u) == 0.0
            assert any(p.box == s.cue_box for p in props[s.image_id])

    def test_person_boxes_are_proposals(self):
        train, _, props = synth_generate(SyntheticSceneSpec(), 12, 6, seed=5)
        for s in train.samples:
            boxes = [p.box for p in props[s.image_id]]
            assert s.b1 in boxes and s.b2 in boxes

    def test_cue_dependent_labels(self):
        assert SyntheticSceneSpec().cue_dependent_labels() == ("commercial", "professional")

    def test_ambiguous_rules_without_cue_rejected(self):
        rules = _default_rules()
        rules["professional"] = ClassRule(colors=("gray", "gray"), gap=(4, 7), cue=None)
        with pytest.raises(ValueError, match="distinct cues"):
            SyntheticSceneSpec(rules=rules)

    def test_pixels_in_range(self):
        train, _, _ = synth_generate(SyntheticSceneSpec(), 12, 0, seed=6)
        for img in train.images.values():
            assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


class TestOversample:
    def test_swap_keeps_label_and_reverses_boxes(self):
        ds = tiny_dataset()
        out = oversample(ds, {"couple": 2})
        added = [s for s in out.samples if s.tag != "orig"]
        assert len(added) == 1
        s = added[0]
        orig = next(x for x in ds.samples if x.label == "couple")
        assert s.tag == "swap"
        assert (s.b1, s.b2) == (orig.b2, orig.b1)
        assert s.label == "couple"

    def test_flip_mirrors_boxes_and_cue(self):
        ds = tiny_dataset()
        out = oversample(ds, {"couple": 3})
        flipped = [s for s in out.samples if s.tag == "flip"]
        assert len(flipped) == 1
        s = flipped[0]
        orig = next(x for x in ds.samples if x.label == "couple")
        w = ds.dims[orig.image_id][0]
        assert s.b1 == Box(w - orig.b1.xmax, orig.b1.ymin, w - orig.b1.xmin, orig.b1.ymax)
        assert s.cue_box == Box(w - orig.cue_box.xmax, orig.cue_box.ymin,
                                w - orig.cue_box.xmin, orig.cue_box.ymax)

    def test_double_flip_restores_boxes(self):
        from dualglance.data.sampling import _mirror_box

        b = Box(3, 5, 9, 14)
        assert _mirror_box(_mirror_box(b, 32), 32) == b

    def test_class_at_target_untouched(self):
        ds = tiny_dataset()
        out = oversample(ds, {"friends": 1})
        assert len(out.samples) == len(ds.samples)

    def test_target_below_current_rejected(self):
        with pytest.raises(ValueError, match="below"):
            oversample(tiny_dataset(), {"friends": 0})

    def test_flipped_image_loads_mirrored(self):
        train, _, _ = synth_generate(SyntheticSceneSpec(), 12, 0, seed=8)
        counts = train.class_counts()
        label = max(counts, key=counts.get)
        # past one swap round per original, augmentation moves on to flips
        out = oversample(train, {label: 2 * counts[label] + 1})
        flipped = next(s for s in out.samples if s.tag == "flip")
        base = out.base_image(flipped.image_id)
        loaded = out.load_image(flipped)
        assert_array_equal(loaded.pixels, base.pixels[:, ::-1, :])


class TestStratifiedBatches:
    def make_samples(self, per_class):
        samples = []
        for label, n in per_class.items():
            for i in range(n):
                samples.append(PairSample(f"{label}{i}", Box(0, 0, 2, 2), Box(4, 0, 6, 2), label))
        return samples

    def test_six_class_batch_32(self):
        samples = self.make_samples({c: 20 for c in FINE_LABELS})
        batches = stratified_batches(samples, 32, seed=0, classes=FINE_LABELS)
        for batch in batches:
            assert len(batch) == 32
            counts = {c: sum(1 for s in batch if s.label == c) for c in FINE_LABELS}
            assert set(counts.values()) <= {5, 6}
            assert sum(counts.values()) == 32

    def test_extra_slots_rotate(self):
        samples = self.make_samples({c: 30 for c in FINE_LABELS})
        batches = stratified_batches(samples, 32, seed=1, classes=FINE_LABELS, num_batches=6)
        sixes = [frozenset(c for c in FINE_LABELS
                           if sum(1 for s in b if s.label == c) == 6) for b in batches]
        assert len(set(sixes)) > 1

    def test_three_class_batch_three(self):
        labels = ("friends", "family", "couple")
        samples = self.make_samples({c: 5 for c in labels})
        batches = stratified_batches(samples, 3, seed=2, classes=labels)
        for batch in batches:
            assert sorted(s.label for s in batch) == sorted(labels)

    def test_deterministic_given_seed(self):
        samples = self.make_samples({c: 11 for c in FINE_LABELS})
        a = stratified_batches(samples, 12, seed=3, classes=FINE_LABELS)
        b = stratified_batches(samples, 12, seed=3, classes=FINE_LABELS)
        assert [[s.image_id for s in batch] for batch in a] == \
               [[s.image_id for s in batch] for batch in b]

    def test_zero_sample_class_rejected(self):
        samples = self.make_samples({"friends": 4})
        with pytest.raises(ValueError, match="family"):
            stratified_batches(samples, 6, seed=0, classes=("friends", "family"))


class TestSplit:
    def test_image_disjointness(self):
        train, _, _ = synth_generate(SyntheticSceneSpec(), 60, 0, seed=9)
        tr, te = split_dataset(train, test_fraction=0.25, seed=0)
        tr_ids = {s.image_id for s in tr.samples}
        te_ids = {s.image_id for s in te.samples}
        assert tr_ids.isdisjoint(te_ids)
        assert len(tr.samples) + len(te.samples) == len(train.samples)

    def test_multi_pair_images_stay_together(self):
        ds = tiny_dataset()
        tr, te = split_dataset(ds, test_fraction=0.5, seed=1)
        for side in (tr, te):
            ids = {s.image_id for s in side.samples}
            assert not ({"im0"} & ids) or sum(1 for s in side.samples if s.image_id == "im0") == 2

    def test_balanced_mode_hits_targets(self):
        train, _, _ = synth_generate(SyntheticSceneSpec(), 120, 0, seed=10)
        tr, te = split_dataset(train, per_class_test=4, seed=2)
        counts = te.class_counts()
        assert all(v >= 4 for v in counts.values())

    def test_zero_fraction(self):
        ds = tiny_dataset()
        tr, te = split_dataset(ds, test_fraction=0.0, seed=3)
        assert len(te.samples) == 0
        assert len(tr.samples) == len(ds.samples)

    def test_infeasible_target_reports_shortfall(self):
        train, _, _ = synth_generate(SyntheticSceneSpec(), 12, 0, seed=11)
        with pytest.raises(ValueError, match="shortfall"):
            split_dataset(train, per_class_test=100, seed=4)
