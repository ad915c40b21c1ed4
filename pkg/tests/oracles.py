"""Independent reference implementations used as test oracles."""

import numpy as np


def brute_median(img, k):
    """Per-pixel, per-channel median of the k x k neighbourhood with edge replication."""
    h, w, c = img.shape
    p = k // 2
    out = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                vals = [img[min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1), ch]
                        for di in range(-p, p + 1) for dj in range(-p, p + 1)]
                out[i, j, ch] = sorted(vals)[len(vals) // 2]
    return out


def corner_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _flags(dets, gts):
    """TP flag per detection (score order), greedy best-IoU matching at 0.5."""
    flat = sorted(((s, i, b) for i, ds in enumerate(dets) for b, s in ds), key=lambda t: -t[0])
    taken = set()
    out = []
    for s, i, b in flat:
        cands = [(corner_iou(b, g), k) for k, g in enumerate(gts[i]) if (i, k) not in taken]
        cands = [c for c in cands if c[0] >= 0.5]
        if cands:
            taken.add((i, max(cands)[1]))
        out.append((s, bool(cands)))
    return out


def pr_oracle(dets, gts, conf):
    """Precision and recall by direct TP/FP/FN counting above ``conf``."""
    kept = [[(b, s) for b, s in ds if s >= conf] for ds in dets]
    flags = _flags(kept, gts)
    tp = sum(f for _, f in flags)
    fp = len(flags) - tp
    fn = sum(len(g) for g in gts) - tp
    precision = tp / (tp + fp) if tp + fp else (1.0 if tp + fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else (1.0 if tp + fp == 0 else 0.0)
    return precision, recall


def ap_oracle(dets, gts):
    """Area under the monotone PR envelope, built from every prefix cut of the ranking."""
    flags = _flags(dets, gts)
    npos = sum(len(g) for g in gts)
    if npos == 0:
        return 1.0 if not flags else 0.0
    points = []
    tp = 0
    for k, (_, f) in enumerate(flags, 1):
        tp += f
        points.append((tp / npos, tp / k))
    area, prev_r = 0.0, 0.0
    for r in sorted({r for r, _ in points}):
        best_p = max(p for rr, p in points if rr >= r)
        area += (r - prev_r) * best_p
        prev_r = r
    return area


def detection_fixtures():
    """Twenty small detection problems: a few hand-made ones plus seeded random ones."""
    fx = [
        # one GT, one good detection
        ([[((10, 10, 8, 8), 0.9)]], [[(10, 10, 8, 8)]]),
        # one GT, no detection
        ([[]], [[(10, 10, 8, 8)]]),
        # false positive ranked first on a 2-GT image
        ([[((50, 50, 8, 8), 0.95), ((10, 10, 8, 8), 0.9), ((30, 30, 8, 8), 0.6)]], [[(10, 10, 8, 8), (30, 30, 8, 8)]]),
        # duplicate detection of the same object
        ([[((20, 20, 10, 10), 0.8), ((21, 20, 10, 10), 0.7)]], [[(20, 20, 10, 10)]]),
        # negatives only, one spurious detection
        ([[], [((5, 5, 4, 4), 0.3)]], [[], []]),
        # below the confidence cut but ranked for AP
        ([[((10, 10, 8, 8), 0.2)], [((40, 40, 8, 8), 0.7)]], [[(10, 10, 8, 8)], [(40, 40, 8, 8)]]),
    ]
    rng = np.random.default_rng(2024)
    while len(fx) < 20:
        n_img = int(rng.integers(1, 6))
        dets, gts = [], []
        for _ in range(n_img):
            g = [tuple(np.round(rng.uniform([8, 8, 6, 6], [56, 56, 20, 20]), 1)) for _ in range(rng.integers(0, 3))]
            d = []
            for b in g:
                if rng.random() < 0.8:
                    jitter = rng.normal(0, [1.5, 1.5, 1.0, 1.0])
                    d.append((tuple(np.maximum(np.array(b) + jitter, 1.0)), float(rng.random())))
            for _ in range(rng.integers(0, 3)):
                d.append((tuple(np.round(rng.uniform([8, 8, 6, 6], [56, 56, 20, 20]), 1)), float(rng.random())))
            dets.append(d)
            gts.append(g)
        fx.append((dets, gts))
    return fx
