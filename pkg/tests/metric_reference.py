"""Brute-force segmentation-metric recomputation used as an oracle.

Counts per-pixel confusion with explicit Python loops so it shares no code
with the library's vectorized accumulator.
"""

import numpy as np


def brute_force_scores(episodes, preds, classes):
    """Recompute mIoU and FB-IoU with explicit per-pixel confusion loops."""
    inter = {c: 0 for c in classes}
    union = {c: 0 for c in classes}
    fg = [0, 0]
    bg = [0, 0]
    for ep, pred in zip(episodes, preds):
        gt = ep.query_mask
        h, w = gt.shape
        for r in range(h):
            for col in range(w):
                p = bool(pred[r, col])
                g = bool(gt[r, col])
                if p and g:
                    inter[ep.class_id] += 1
                    fg[0] += 1
                if p or g:
                    union[ep.class_id] += 1
                    fg[1] += 1
                if not p and not g:
                    bg[0] += 1
                if not p or not g:
                    bg[1] += 1
    present = [c for c in sorted(classes) if c in {e.class_id for e in episodes}]
    scores = [(1.0 if union[c] == 0 else inter[c] / union[c]) for c in present]
    miou = float(np.mean(scores))
    fbiou = float(((fg[0] / fg[1] if fg[1] else 1.0) + (bg[0] / bg[1] if bg[1] else 1.0)) / 2.0)
    return miou, fbiou
