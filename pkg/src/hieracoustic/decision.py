"""Segment-level decisions from frame posteriors."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class DecisionError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentPosteriors:
    frame_posteriors: np.ndarray
    segment_id: str = ""

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.frame_posteriors, dtype=np.float64))
        if p.shape[0] == 0 or p.size == 0:
            raise DecisionError("segment has no frames")
        object.__setattr__(self, "frame_posteriors", p)


@dataclass(frozen=True)
class SegmentDecision:
    predicted_class: int
    mean_confidence: np.ndarray
    margin: float
    segment_id: str = ""

    @property
    def confidence(self) -> float:
        return float(self.mean_confidence[self.predicted_class])


def _posteriors(post) -> SegmentPosteriors:
    return post if isinstance(post, SegmentPosteriors) else SegmentPosteriors(post)


def classify_segment(post) -> SegmentDecision:
    """Average the frame posteriors and take the arg max.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class
    index. ``margin`` is top-1 minus top-2 mean confidence.
    """
    post = _posteriors(post)
    mean = post.frame_posteriors.mean(axis=0)
    c = int(np.argmax(mean))
    if mean.shape[0] > 1:
        top2 = np.partition(mean, -2)[-2:]
        margin = float(top2[1] - top2[0])
    else:
        margin = float(mean[0])
    return SegmentDecision(c, mean, margin, post.segment_id)


def majority_vote(post) -> int:
    """Modal per-frame arg max, ties to the lowest class index."""
    p = _posteriors(post).frame_posteriors
    votes = np.bincount(np.argmax(p, axis=1), minlength=p.shape[1])
    return int(np.argmax(votes))


def write_predictions(path, decisions, class_names=None) -> None:
    """``segment_id,predicted_class,confidence_top1,margin`` CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "predicted_class", "confidence_top1", "margin"])
        for d in decisions:
            name = class_names[d.predicted_class] if class_names else d.predicted_class
            w.writerow([d.segment_id, name, f"{d.confidence:.6f}", f"{d.margin:.6f}"])
