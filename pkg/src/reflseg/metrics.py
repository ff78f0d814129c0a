"""mIoU / FB-IoU accumulation and the fixed-episode evaluation protocol.

Counts are integers, so accumulator merging is exactly associative and
parallel evaluation is bit-identical to serial evaluation as long as each
episode's prediction is computed independently, which it is: model
parameters are read-only during evaluation.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .episodes import (
    DegenerateEpisodeError,
    FoldSplit,
    Manifest,
    sample_episode,
)

THREADS_ENV = "REFLSEG_THREADS"


class NoClassesObservedError(RuntimeError):
    pass


@dataclass
class ConfusionAccumulator:
    """Per-class and foreground/background intersection/union pixel counts."""

    inter: dict = field(default_factory=dict)
    union: dict = field(default_factory=dict)
    fb: list = field(default_factory=lambda: [0, 0, 0, 0])  # fg_i, fg_u, bg_i, bg_u

    def update(self, pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int):
        if pred_mask.shape != gt_mask.shape:
            raise ValueError(f"shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
        p = pred_mask.astype(bool)
        g = gt_mask.astype(bool)
        inter = int(np.count_nonzero(p & g))
        union = int(np.count_nonzero(p | g))
        self.inter[class_id] = self.inter.get(class_id, 0) + inter
        self.union[class_id] = self.union.get(class_id, 0) + union
        self.fb[0] += inter
        self.fb[1] += union
        self.fb[2] += int(np.count_nonzero(~p & ~g))
        self.fb[3] += int(np.count_nonzero(~p | ~g))

    def merge(self, other: "ConfusionAccumulator"):
        for c, v in other.inter.items():
            self.inter[c] = self.inter.get(c, 0) + v
        for c, v in other.union.items():
            self.union[c] = self.union.get(c, 0) + v
        self.fb = [a + b for a, b in zip(self.fb, other.fb)]

    def class_iou(self, class_id: int) -> float:
        return self.inter[class_id] / self.union[class_id]


def miou(acc: ConfusionAccumulator, classes) -> float:
    """Mean IoU over the given classes, reported x100.

    Classes with zero union are excluded (warned about by callers).
    """
    ious = [acc.class_iou(c) for c in classes
            if acc.union.get(c, 0) > 0]
    if not ious:
        raise NoClassesObservedError("no classes with nonzero union")
    return 100.0 * float(np.mean(ious))


def fbiou(acc: ConfusionAccumulator) -> float:
    """Mean of foreground and background IoU, x100."""
    fg_i, fg_u, bg_i, bg_u = acc.fb
    if fg_u == 0 and bg_u == 0:
        raise NoClassesObservedError("empty accumulator")
    fg = fg_i / fg_u if fg_u else 0.0
    bg = bg_i / bg_u if bg_u else 0.0
    return 100.0 * 0.5 * (fg + bg)


@dataclass
class EvalReport:
    fold: int
    k: int
    n_episodes: int
    miou: float
    fbiou: float
    class_ious: dict
    skipped: int


def _episode_for_index(manifest: Manifest, split: FoldSplit, k: int,
                       seed: int, index: int, feature_stride: int):
    """Deterministic episode for a slot; degenerate draws get replacements."""
    skipped = 0
    for attempt in range(100):
        rng = np.random.default_rng([seed, index, attempt])
        try:
            return sample_episode(manifest, split, "test", k, rng,
                                  feature_stride=feature_stride), skipped
        except DegenerateEpisodeError:
            skipped += 1
    raise DegenerateEpisodeError(f"episode slot {index}: no valid draw found")


def n_workers() -> int:
    cap = os.environ.get(THREADS_ENV)
    if cap:
        return max(1, int(cap))
    return min(4, os.cpu_count() or 1)


def evaluate(model, manifest: Manifest, split: FoldSplit, k: int,
             n_episodes: int = 1000, seed: int = 0,
             workers: int | None = None) -> EvalReport:
    """Run the n-episode test protocol; deterministic in `seed`.

    Episodes are assigned to fixed slots, so the worker count never changes
    the result.
    """
    stride = model.backbone.total_stride

    def run_one(index: int):
        episode, skipped = _episode_for_index(
            manifest, split, k, seed, index, stride)
        result = model.forward(episode)
        pred = result.predicted_mask(stride)
        return episode, pred, skipped

    acc = ConfusionAccumulator()
    total_skipped = 0
    workers = workers if workers is not None else n_workers()
    if workers <= 1:
        outcomes = map(run_one, range(n_episodes))
    else:
        pool = ThreadPoolExecutor(max_workers=workers)
        outcomes = pool.map(run_one, range(n_episodes))
    for episode, pred, skipped in outcomes:
        total_skipped += skipped
        acc.update(pred, episode.query.mask, episode.class_id)
    if workers > 1:
        pool.shutdown()

    class_ious = {c: acc.class_iou(c) for c in split.novel_classes
                  if acc.union.get(c, 0) > 0}
    return EvalReport(
        fold=split.fold, k=k, n_episodes=n_episodes,
        miou=miou(acc, split.novel_classes), fbiou=fbiou(acc),
        class_ious=class_ious, skipped=total_skipped,
    )
