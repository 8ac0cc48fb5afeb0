"""Relationship label hierarchy and crowd-vote aggregation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

__all__ = [
    "FINE_LABELS",
    "COARSE_LABELS",
    "NOT_SURE",
    "fine_to_coarse",
    "label_index",
    "VoteRecord",
    "majority_vote",
    "agreement_rate",
]

FINE_LABELS = ("friends", "family", "couple", "professional", "commercial", "no-relation")
COARSE_LABELS = ("intimate", "non-intimate", "no-relation")
NOT_SURE = "not-sure"

_COARSE_OF = {
    "friends": "intimate",
    "family": "intimate",
    "couple": "intimate",
    "professional": "non-intimate",
    "commercial": "non-intimate",
    "no-relation": "no-relation",
}


def fine_to_coarse(fine: str) -> str:
    """Collapse a fine label onto the three-way hierarchy level."""
    try:
        return _COARSE_OF[fine]
    except KeyError:
        raise ValueError(f"unknown fine label {fine!r}") from None


def label_index(fine: str, num_classes: int) -> int:
    """Class index of a fine label in 6-class mode, or of its coarse parent
    in 3-class mode."""
    if num_classes == 6:
        return FINE_LABELS.index(fine)
    if num_classes == 3:
        return COARSE_LABELS.index(fine_to_coarse(fine))
    raise ValueError(f"num_classes must be 3 or 6, got {num_classes}")


@dataclass(frozen=True)
class VoteRecord:
    sample_id: str
    votes: tuple[str, ...]

    def __post_init__(self):
        if len(self.votes) != 5:
            raise ValueError(f"{self.sample_id}: need exactly 5 votes, got {len(self.votes)}")
        bad = [v for v in self.votes if v not in FINE_LABELS and v != NOT_SURE]
        if bad:
            raise ValueError(f"{self.sample_id}: unknown vote value(s) {bad}")


def majority_vote(record: VoteRecord) -> str | None:
    """Majority label of a 5-vote record, or None for an invalid annotation.

    A winner needs a true majority: at least 3 of the 5 votes (so any split
    without one, e.g. 2-2-1, is invalid, and every tie is too). Not-sure is a
    distinct vote value that can never win, but not-sure votes do not block a
    label that reaches 3 on its own.
    """
    counts = Counter(record.votes)
    ranked = counts.most_common()
    top_label, top_count = ranked[0]
    if top_count < 3 or top_label == NOT_SURE:
        return None
    return top_label


def agreement_rate(records) -> float:
    """Fraction of individual judgments that agree with their record's
    majority, over records that have a valid majority."""
    matching = total = 0
    for record in records:
        winner = majority_vote(record)
        if winner is None:
            raise ValueError(f"{record.sample_id}: no valid majority; filter invalid records first")
        matching += sum(1 for v in record.votes if v == winner)
        total += len(record.votes)
    if total == 0:
        raise ValueError("agreement_rate needs at least one record")
    return matching / total
