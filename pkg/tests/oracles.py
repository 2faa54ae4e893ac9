"""Independent brute-force reference implementations used as test oracles.

Everything here is deliberately written in plain numpy/scipy scalar style,
separate from the library's vectorized/torch code paths.
"""

import numpy as np
from scipy import ndimage

CROSS_KERNEL = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.float64) / 5.0


def softmax(logits, axis):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def wce_oracle(logits, target_idx, alpha, k):
    """Per-pixel explicit weighted cross-entropy: -alpha_y * log p_y, summed / k."""
    b, c, h, w = logits.shape
    p = softmax(np.asarray(logits, dtype=np.float64), axis=1)
    total = 0.0
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                y = int(target_idx[bi, i, j])
                total += -alpha[y] * np.log(p[bi, y, i, j])
    return total / k


def hausdorff_oracle(logits, target_idx, alpha, erosions, exponent, k):
    """Literal erosion loop: squared softmax error, convolve with the
    normalized cross kernel (zero boundary), gate by the previous map."""
    b, c, h, w = logits.shape
    p = softmax(np.asarray(logits, dtype=np.float64), axis=1)
    one_hot = np.zeros_like(p)
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                one_hot[bi, int(target_idx[bi, i, j]), i, j] = 1.0
    e = (p - one_hot) ** 2
    total = 0.0
    for it in range(1, erosions + 1):
        eroded = np.empty_like(e)
        for bi in range(b):
            for ci in range(c):
                conv = ndimage.convolve(e[bi, ci], CROSS_KERNEL,
                                        mode="constant", cval=0.0)
                eroded[bi, ci] = conv * e[bi, ci]
        e = eroded
        for bi in range(b):
            for ci in range(c):
                total += alpha[ci] * e[bi, ci].mean() * it ** exponent
    return total / k


def cps_oracle(logits_1, logits_2, alpha, k):
    """Softmax both, argmax both (ties to lowest index), two weighted CE terms."""
    idx_1 = argmax_lowest(logits_1)
    idx_2 = argmax_lowest(logits_2)
    return wce_oracle(logits_1, idx_2, alpha, k) + wce_oracle(logits_2, idx_1, alpha, k)


def argmax_lowest(logits):
    b, c, h, w = logits.shape
    out = np.zeros((b, h, w), dtype=np.int64)
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                col = logits[bi, :, i, j]
                out[bi, i, j] = int(np.flatnonzero(col == col.max())[0])
    return out


def tversky_oracle(logits, target_idx, a, b_param, smooth):
    """Soft confusion counts accumulated pixel by pixel."""
    b, c, h, w = logits.shape
    p = softmax(np.asarray(logits, dtype=np.float64), axis=1)
    losses = []
    for ci in range(c):
        tp = fp = fn = 0.0
        for bi in range(b):
            for i in range(h):
                for j in range(w):
                    y = 1.0 if target_idx[bi, i, j] == ci else 0.0
                    tp += p[bi, ci, i, j] * y
                    fp += p[bi, ci, i, j] * (1.0 - y)
                    fn += (1.0 - p[bi, ci, i, j]) * y
        index = (tp + smooth) / (tp + a * fp + b_param * fn + smooth)
        losses.append(1.0 - index)
    return float(np.mean(losses))


def point_segment_distance(point, a, b):
    point, a, b = (np.asarray(v, dtype=np.float64) for v in (point, a, b))
    d = b - a
    len2 = float(d @ d)
    if len2 == 0.0:
        return float(np.hypot(*(point - a)))
    s = float(np.clip((point - a) @ d / len2, 0.0, 1.0))
    return float(np.hypot(*(point - (a + s * d))))


def line_mask_oracle(segments_px, shape, buffer_px):
    """Distance scan over every pixel centre against every segment."""
    rows, cols = shape
    out = np.zeros(shape, dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            centre = (r + 0.5, c + 0.5)
            for a, b in segments_px:
                if point_segment_distance(centre, a, b) <= buffer_px:
                    out[r, c] = 1
                    break
    return out


def point_in_rings_even_odd(point, rings):
    """Crossing-number containment for a point against a ring set."""
    y, x = point  # (row, col) in pixel space
    crossings = 0
    for ring in rings:
        for (r0, c0), (r1, c1) in zip(ring[:-1], ring[1:]):
            if (r0 > y) != (r1 > y):
                cross = c0 + (y - r0) * (c1 - c0) / (r1 - r0)
                if x < cross:
                    crossings += 1
    return crossings % 2 == 1


def polygon_mask_oracle(rings_px, shape):
    rows, cols = shape
    out = np.zeros(shape, dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            if point_in_rings_even_odd((r + 0.5, c + 0.5), rings_px):
                out[r, c] = 1
    return out


def merge_max_oracle(chips, shape):
    """Per-pixel, per-class max accumulation over chips."""
    rows, cols = shape
    probs = np.zeros((5, rows, cols), dtype=np.float64)
    for chip in chips:
        r0, c0, cs = chip.index.row_off, chip.index.col_off, chip.index.chip_size
        for ci in range(5):
            for i in range(cs):
                for j in range(cs):
                    value = chip.probs[ci, i, j]
                    if value > probs[ci, r0 + i, c0 + j]:
                        probs[ci, r0 + i, c0 + j] = value
    return probs


def recall_oracle(probs, gt, threshold):
    """Confusion-matrix recall per class from explicit TP/FN counts."""
    recalls = np.full(5, np.nan)
    rows, cols = gt.shape
    for ci in range(5):
        tp = fn = 0
        for i in range(rows):
            for j in range(cols):
                if gt[i, j] != ci:
                    continue
                if probs[ci, i, j] >= threshold:
                    tp += 1
                else:
                    fn += 1
        if tp + fn:
            recalls[ci] = tp / (tp + fn)
    return recalls


def finite_difference_gradient(fn, x, step=1e-5):
    """Central finite differences of a scalar function over an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return grad
