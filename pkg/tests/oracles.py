"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np


def grid_iou(a, b, n=20):
    """IoU by counting unit cells of integer boxes on an n x n grid."""
    def cells(box):
        x0, y0, x1, y1 = box
        return {(x, y) for x in range(x0, x1) for y in range(y0, y1)}
    ca, cb = cells(a), cells(b)
    return len(ca & cb) / len(ca | cb)


def box_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if inter > 0 else 0.0


def optimal_assignment(prev, dets, thr):
    """Max total IoU matching by enumerating every injective assignment."""
    best, best_map = -1.0, {}
    slots = list(range(len(prev))) + [None] * len(dets)
    for perm in itertools.permutations(slots, len(dets)):
        used = [p for p in perm if p is not None]
        if len(used) != len(set(used)):
            continue
        total, ok = 0.0, True
        for j, i in enumerate(perm):
            if i is None:
                continue
            v = box_iou(prev[i], dets[j])
            if v < thr or v == 0:
                ok = False
                break
            total += v
        if ok and total > best + 1e-15:
            best, best_map = total, {j: i for j, i in enumerate(perm) if i is not None}
    return best_map


def oracle_tracklets(frames, thr):
    """Frame-to-frame linking with exhaustive optimal assignment."""
    tracks, last = [], []
    for t, dets in enumerate(frames):
        if not dets:
            continue
        amap = optimal_assignment(last, dets, thr)
        for j, d in enumerate(dets):
            i = amap.get(j)
            if i is None:
                tracks.append({t: d})
                last.append(d)
            else:
                tracks[i][t] = d
                last[i] = d
    return tracks


def _well_posed(last, dets, thr):
    vals = [box_iou(p, d) for p in last for d in dets]
    nz = [v for v in vals if v > 0]
    if len(nz) != len(set(nz)):
        return False
    m = np.array(vals).reshape(len(last), len(dets)) if last else np.zeros((0, len(dets)))
    m = np.where(m >= thr, m, 0.0)
    chosen = set()
    for i in range(m.shape[0]):
        if m[i].max(initial=0.0) == 0:
            continue
        j = int(m[i].argmax())
        if int(m[:, j].argmax()) != i or j in chosen:
            return False
        chosen.add(j)
    return True


def random_window(rng, thr=0.3, max_persons=3, max_frames=6):
    """Random boxes with strictly ordered IoUs and unique mutual maxima, or None."""
    n = int(rng.integers(1, max_persons + 1))
    f = int(rng.integers(2, max_frames + 1))
    pos = rng.uniform(0.05, 0.75, (n, 2))
    size = rng.uniform(0.08, 0.2, (n, 2))
    frames = []
    for _ in range(f):
        pos = pos + rng.normal(0, 0.03, pos.shape)
        dets = []
        for p in rng.permutation(n):
            if rng.random() < 0.15:
                continue
            x0, y0 = pos[p]
            dets.append((float(x0), float(y0), float(x0 + size[p, 0]), float(y0 + size[p, 1])))
        frames.append(dets)
    last = []
    for dets in frames:
        if not dets:
            continue
        if not _well_posed(last, dets, thr):
            return None
        amap = optimal_assignment(last, dets, thr)
        for j, d in enumerate(dets):
            if j in amap:
                last[amap[j]] = d
            else:
                last.append(d)
    return frames


def distance_trend(tracks_xy):
    """+1 if the two persons' distance shrinks over the video, else -1."""
    a, b = tracks_xy
    d = np.linalg.norm(a - b, axis=1)
    return 1 if d[-1] < d[0] - 0.05 else -1
