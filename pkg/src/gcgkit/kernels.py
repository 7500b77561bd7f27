"""Hot inner loops: RLE coding, RLE overlap, box IoU, NMS and min-cost assignment.

Each kernel has a numba implementation (``nb_*``) and a vectorised numpy
implementation (``np_*``).  The unprefixed names dispatch on
``gcgkit._accel.USE_NUMBA``.  Both variants are importable directly so the
benchmark and the tests can compare them in one process.

Run-length arrays follow the COCO convention: a column-major scan, the first
run counts zeros, runs alternate zeros/ones.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# numba kernels


@njit
def nb_rle_encode(flat):
    n = flat.shape[0]
    out = np.empty(n + 1, dtype=np.int64)
    k = 0
    prev = 0
    run = 0
    for i in range(n):
        v = 1 if flat[i] else 0
        if v != prev:
            out[k] = run
            k += 1
            run = 0
            prev = v
        run += 1
    out[k] = run
    k += 1
    return out[:k].copy()


@njit
def nb_rle_decode(runs, n):
    out = np.zeros(n, dtype=np.uint8)
    pos = 0
    for k in range(runs.shape[0]):
        r = runs[k]
        if k % 2 == 1:
            for i in range(pos, pos + r):
                out[i] = 1
        pos += r
    return out


@njit
def nb_rle_area(runs):
    s = 0
    for k in range(1, runs.shape[0], 2):
        s += runs[k]
    return s


@njit
def nb_rle_intersection(a, b):
    # merge walk over run boundaries
    ia = 0
    ib = 0
    ra = a[0] if a.shape[0] > 0 else 0
    rb = b[0] if b.shape[0] > 0 else 0
    va = 0
    vb = 0
    inter = 0
    while ia < a.shape[0] and ib < b.shape[0]:
        step = ra if ra < rb else rb
        if va == 1 and vb == 1:
            inter += step
        ra -= step
        rb -= step
        while ra == 0 and ia < a.shape[0]:
            ia += 1
            va = 1 - va
            if ia < a.shape[0]:
                ra = a[ia]
        while rb == 0 and ib < b.shape[0]:
            ib += 1
            vb = 1 - vb
            if ib < b.shape[0]:
                rb = b[ib]
    return inter


@njit
def nb_rle_iou_matrix(runs_a, off_a, runs_b, off_b):
    na = off_a.shape[0] - 1
    nb = off_b.shape[0] - 1
    inter = np.zeros((na, nb), dtype=np.int64)
    union = np.zeros((na, nb), dtype=np.int64)
    area_b = np.empty(nb, dtype=np.int64)
    for j in range(nb):
        area_b[j] = nb_rle_area(runs_b[off_b[j]:off_b[j + 1]])
    for i in range(na):
        ra = runs_a[off_a[i]:off_a[i + 1]]
        area_a = nb_rle_area(ra)
        for j in range(nb):
            it = nb_rle_intersection(ra, runs_b[off_b[j]:off_b[j + 1]])
            inter[i, j] = it
            union[i, j] = area_a + area_b[j] - it
    return inter, union


@njit
def nb_box_iou_matrix(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            w = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            h = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if w <= 0 or h <= 0:
                continue
            inter = w * h
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            out[i, j] = inter / (area_a + area_b - inter)
    return out


@njit
def nb_nms_keep(boxes, thresh):
    # boxes already in processing order
    n = boxes.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    kept_idx = np.empty(n, dtype=np.int64)
    nk = 0
    for i in range(n):
        ok = True
        ai = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for t in range(nk):
            j = kept_idx[t]
            w = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            h = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if w <= 0 or h <= 0:
                continue
            inter = w * h
            aj = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (ai + aj - inter) >= thresh:
                ok = False
                break
        if ok:
            keep[i] = True
            kept_idx[nk] = i
            nk += 1
    return keep


@njit
def nb_min_cost_assignment(cost):
    """Shortest-augmenting-path Hungarian method, rows <= cols.

    Returns ``col_of_row``; every row is assigned.
    """
    n = cost.shape[0]
    m = cost.shape[1]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


# ---------------------------------------------------------------------------
# numpy kernels


def np_rle_encode(flat):
    flat = np.asarray(flat).astype(bool, copy=False)
    n = flat.shape[0]
    if n == 0:
        return np.zeros(1, dtype=np.int64)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [n]))
    runs = np.diff(bounds).astype(np.int64)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs


def np_rle_decode(runs, n):
    runs = np.asarray(runs, dtype=np.int64)
    vals = (np.arange(runs.shape[0]) % 2).astype(np.uint8)
    out = np.repeat(vals, runs)
    if out.shape[0] != n:
        raise ValueError("run lengths do not sum to the mask size")
    return out


def np_rle_area(runs):
    return int(np.asarray(runs, dtype=np.int64)[1::2].sum())


def _np_dense(runs, off):
    n_masks = off.shape[0] - 1
    if n_masks == 0:
        return np.zeros((0, 0))
    total = int(runs[off[0]:off[1]].sum())
    dense = np.empty((n_masks, total), dtype=np.float64)
    for i in range(n_masks):
        dense[i] = np_rle_decode(runs[off[i]:off[i + 1]], total)
    return dense


def np_rle_intersection(a, b):
    n = int(np.asarray(a).sum())
    return int(np.count_nonzero(np_rle_decode(a, n) & np_rle_decode(b, n)))


def np_rle_iou_matrix(runs_a, off_a, runs_b, off_b):
    na = off_a.shape[0] - 1
    nb = off_b.shape[0] - 1
    if na == 0 or nb == 0:
        z = np.zeros((na, nb), dtype=np.int64)
        return z, z.copy()
    da = _np_dense(runs_a, off_a)
    db = _np_dense(runs_b, off_b)
    # float64 matmul is exact for pixel counts below 2**53
    inter = np.rint(da @ db.T).astype(np.int64)
    area_a = np.rint(da.sum(axis=1)).astype(np.int64)
    area_b = np.rint(db.sum(axis=1)).astype(np.int64)
    union = area_a[:, None] + area_b[None, :] - inter
    return inter, union


def np_box_iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def np_nms_keep(boxes, thresh):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    keep = np.zeros(n, dtype=bool)
    kept = []
    for i in range(n):
        if kept:
            ious = np_box_iou_matrix(boxes[i:i + 1], boxes[kept])[0]
            if np.any(ious >= thresh):
                continue
        keep[i] = True
        kept.append(i)
    return keep


def np_min_cost_assignment(cost):
    from scipy.optimize import linear_sum_assignment

    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    out = np.full(cost.shape[0], -1, dtype=np.int64)
    out[rows] = cols
    return out


# ---------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    rle_encode_flat = nb_rle_encode
    rle_decode_flat = nb_rle_decode
    rle_area = nb_rle_area
    rle_intersection = nb_rle_intersection
    rle_iou_matrix = nb_rle_iou_matrix
    box_iou_matrix = nb_box_iou_matrix
    nms_keep = nb_nms_keep
    min_cost_assignment = nb_min_cost_assignment
else:
    rle_encode_flat = np_rle_encode
    rle_decode_flat = np_rle_decode
    rle_area = np_rle_area
    rle_intersection = np_rle_intersection
    rle_iou_matrix = np_rle_iou_matrix
    box_iou_matrix = np_box_iou_matrix
    nms_keep = np_nms_keep
    min_cost_assignment = np_min_cost_assignment


def pack_runs(run_list):
    """Concatenate run arrays into (flat, offsets) for the matrix kernels."""
    offs = np.zeros(len(run_list) + 1, dtype=np.int64)
    for i, r in enumerate(run_list):
        offs[i + 1] = offs[i] + len(r)
    if run_list:
        flat = np.concatenate([np.asarray(r, dtype=np.int64) for r in run_list])
    else:
        flat = np.zeros(0, dtype=np.int64)
    return flat, offs
