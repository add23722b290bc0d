"""Hot voxel/edge kernels with a numba fast path and a pure-numpy fallback.

Backend selection happens once at import: numba is used when importable
unless ``LESIONUQ_NO_NUMBA=1`` is set.  Both implementations are always
importable for benchmarking; integer kernels (component labeling) agree
bit-exactly across backends, the float kernel (CSR matmul) agrees to
summation-order rounding.
"""

import os

import numpy as np

_FLAG = os.environ.get("LESIONUQ_NO_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG in {"1", "true", "yes"}

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled via LESIONUQ_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return wrap


BACKEND = "numba" if HAVE_NUMBA else "numpy"

# 13 neighbor offsets (dz, dy, dx) that precede (0,0,0) in raster order.
_OFFS_BWD = np.array(
    [
        (dz, dy, dx)
        for dz in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dz, dy, dx) < (0, 0, 0)
    ],
    dtype=np.int64,
)

# All 26 neighbor offsets, for the propagation fallback.
_OFFS_ALL = np.array(
    [
        (dz, dy, dx)
        for dz in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dz, dy, dx) != (0, 0, 0)
    ],
    dtype=np.int64,
)


@njit(cache=True)
def _uf_find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True)
def _cca26_scan(mask, offs, labels, parent):
    """First pass: provisional labels + union-find merges. Returns next id."""
    nz, ny, nx = mask.shape
    nxt = 1
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if mask[z, y, x] == 0:
                    continue
                best = -1
                for k in range(offs.shape[0]):
                    zz = z + offs[k, 0]
                    yy = y + offs[k, 1]
                    xx = x + offs[k, 2]
                    if zz < 0 or yy < 0 or xx < 0 or xx >= nx or yy >= ny:
                        continue
                    if mask[zz, yy, xx] == 0:
                        continue
                    r = _uf_find(parent, labels[zz, yy, xx])
                    if best == -1 or r < best:
                        best = r
                if best == -1:
                    labels[z, y, x] = nxt
                    parent[nxt] = nxt
                    nxt += 1
                else:
                    labels[z, y, x] = best
                    for k in range(offs.shape[0]):
                        zz = z + offs[k, 0]
                        yy = y + offs[k, 1]
                        xx = x + offs[k, 2]
                        if zz < 0 or yy < 0 or xx < 0 or xx >= nx or yy >= ny:
                            continue
                        if mask[zz, yy, xx] == 0:
                            continue
                        r = _uf_find(parent, labels[zz, yy, xx])
                        parent[r] = best
    return nxt


@njit(cache=True)
def _cca26_resolve(labels, parent, nxt):
    """Second pass: dense ids 1..K ordered by first provisional label."""
    remap = np.zeros(nxt, dtype=np.int32)
    k = 0
    for p in range(1, nxt):
        r = _uf_find(parent, p)
        if r == p:
            k += 1
            remap[p] = k
        else:
            remap[p] = remap[r]
    nz, ny, nx = labels.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if labels[z, y, x] != 0:
                    labels[z, y, x] = remap[labels[z, y, x]]
    return k


def cca26_label_numba(mask):
    n_fg = int(mask.sum())
    labels = np.zeros(mask.shape, dtype=np.int32)
    parent = np.zeros(n_fg + 1, dtype=np.int32)
    nxt = _cca26_scan(mask, _OFFS_BWD, labels, parent)
    k = _cca26_resolve(labels, parent, nxt)
    return labels, int(k)


def cca26_label_numpy(mask):
    """Iterative min-label propagation over the 26-neighborhood.

    Each round takes the minimum label over all shifted copies; converges
    in O(component diameter) rounds.  Final labels are densified in
    ascending order of each component's smallest linear index, matching
    the union-find path exactly.
    """
    nz, ny, nx = mask.shape
    fg = mask != 0
    sentinel = np.iinfo(np.int64).max
    lab = np.where(fg, np.arange(mask.size, dtype=np.int64).reshape(mask.shape), sentinel)
    padded = np.full((nz + 2, ny + 2, nx + 2), sentinel, dtype=np.int64)
    while True:
        padded[1:-1, 1:-1, 1:-1] = lab
        best = lab.copy()
        for dz, dy, dx in _OFFS_ALL:
            view = padded[1 + dz : 1 + dz + nz, 1 + dy : 1 + dy + ny, 1 + dx : 1 + dx + nx]
            np.minimum(best, view, out=best)
        best[~fg] = sentinel
        if np.array_equal(best, lab):
            break
        lab = best
    roots = np.unique(lab[fg])
    labels = np.zeros(mask.shape, dtype=np.int32)
    if roots.size:
        labels[fg] = np.searchsorted(roots, lab[fg]).astype(np.int32) + 1
    return labels, int(roots.size)


@njit(cache=True)
def _csr_matmul_core(indptr, indices, data, x, out):
    n = indptr.shape[0] - 1
    f = x.shape[1]
    for i in range(n):
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            w = data[k]
            for c in range(f):
                out[i, c] += w * x[j, c]


def csr_matmul_numba(indptr, indices, data, x):
    out = np.zeros((indptr.shape[0] - 1, x.shape[1]), dtype=np.float64)
    _csr_matmul_core(indptr, indices, data, x, out)
    return out


def csr_matmul_numpy(indptr, indices, data, x):
    n = indptr.shape[0] - 1
    out = np.zeros((n, x.shape[1]), dtype=np.float64)
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
    np.add.at(out, rows, data[:, None] * x[indices])
    return out


if HAVE_NUMBA:
    cca26_label = cca26_label_numba
    csr_matmul = csr_matmul_numba
else:
    cca26_label = cca26_label_numpy
    csr_matmul = csr_matmul_numpy
