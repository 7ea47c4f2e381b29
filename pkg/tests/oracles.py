"""Slow, obviously-correct reference implementations used as test oracles."""

import numpy as np


def brute_force_extreme_frame(values, reference, find_min):
    """Enumerate every maximal run by scanning, no vectorisation."""
    values = [float(v) for v in values]
    ordered = sorted(values)
    med = ordered[(len(ordered) - 1) // 2]
    inside = [(v < med) if find_min else (v > med) for v in values]
    blocks, start = [], None
    for i, flag in enumerate(inside + [False]):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            blocks.append((start, i - 1))
            start = None
    if not blocks:
        return None
    best, best_d = None, None
    for first, last in blocks:
        d = 0 if first <= reference <= last else min(abs(reference - first), abs(reference - last))
        if best_d is None or d < best_d:
            best, best_d = (first, last), d
    first, last = best
    pick = first
    for i in range(first, last + 1):
        if (values[i] < values[pick]) if find_min else (values[i] > values[pick]):
            pick = i
    return pick


def point_in_polygon(x, y, poly):
    """Even-odd ray casting towards +x."""
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


def raycast_fill(poly, height, width):
    out = np.zeros((height, width), dtype=bool)
    for r in range(height):
        for c in range(width):
            out[r, c] = point_in_polygon(c, r, poly)
    return out


def closed_form_params(num_blocks, layers, widths=(16, 24, 32, 40), k=3, residual=False, peephole=False):
    """Parameter count written out term by term from the architecture description."""
    total, cin = 0, 1
    for b in range(num_blocks):
        h = widths[b]
        for _ in range(layers):
            total += 4 * h * (cin + h) * k * k + 4 * h  # one conv for all four gates
            total += 3 * h if peephole else 0
            cin = h
    if residual:
        block_in = 1 if num_blocks == 1 else widths[num_blocks - 2]
        if block_in != widths[num_blocks - 1]:
            total += block_in * widths[num_blocks - 1] + widths[num_blocks - 1]
    for b in range(num_blocks - 1, 0, -1):
        up_in, skip = widths[b], widths[b - 1]
        total += up_in * skip * k * k + skip  # conv after upsampling
        total += 2 * skip * skip * k * k + skip  # fuse conv on the concatenation
    total += widths[0] + 1  # 1x1 head
    return total
