"""Reference (pure Python) marker flooding on a 4/8-connected pixel graph."""
import heapq
import math

import numpy as np

COST_SCALE = float(2 ** 32)
_INF = np.iinfo(np.int64).max


def step_cost(a, b, spatial):
    """Quantized cost of one step between pixel colours ``a`` and ``b``.

    Must match the compiled kernel bit for bit: channel-ordered sum of
    squares, sqrt, add the spatial term, scale and round half up.
    """
    acc = 0.0
    for x, y in zip(a, b):
        d = x - y
        acc = acc + d * d
    return int(math.floor((math.sqrt(acc) + spatial) * COST_SCALE + 0.5))


def neighbour_offsets(connectivity):
    offs = [(-1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0), (1, 0, 1.0)]
    if connectivity == 8:
        s = math.sqrt(2.0)
        offs += [(-1, -1, s), (-1, 1, s), (1, -1, s), (1, 1, s)]
    elif connectivity != 4:
        raise ValueError("connectivity must be 4 or 8")
    return offs


def flood(image, markers, step, connectivity=4):
    """Multi-source shortest paths with lexicographic (cost, id) priority.

    ``image`` is float64 (h, w, c); ``markers`` int64 (k, 2) rows/cols, id
    i+1 for row i.  Returns integer path costs and int32 region ids.
    """
    h, w = image.shape[:2]
    pix = np.ascontiguousarray(image, dtype=np.float64).reshape(h * w, -1).tolist()
    dist = [_INF] * (h * w)
    label = [0] * (h * w)
    done = [False] * (h * w)
    offs = neighbour_offsets(connectivity)
    heap = []
    for i, (r, c) in enumerate(np.asarray(markers, dtype=np.int64).reshape(-1, 2).tolist()):
        idx = r * w + c
        if label[idx] == 0:  # repeated marker pixel keeps the lowest id
            dist[idx], label[idx] = 0, i + 1
            heap.append((0, i + 1, idx))
    heapq.heapify(heap)
    while heap:
        d, lab, idx = heapq.heappop(heap)
        if done[idx]:
            continue
        done[idx] = True
        r, c = divmod(idx, w)
        for dr, dc, length in offs:
            rr, cc = r + dr, c + dc
            if rr < 0 or rr >= h or cc < 0 or cc >= w:
                continue
            nidx = rr * w + cc
            if done[nidx]:
                continue
            nd = d + step_cost(pix[idx], pix[nidx], step * length)
            if nd < dist[nidx] or (nd == dist[nidx] and lab < label[nidx]):
                dist[nidx], label[nidx] = nd, lab
                heapq.heappush(heap, (nd, lab, nidx))
    return (np.array(dist, dtype=np.int64).reshape(h, w),
            np.array(label, dtype=np.int32).reshape(h, w))
