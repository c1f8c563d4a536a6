"""Hot loops, compiled with numba when available.

Set ``COUNTGNN_DISABLE_NUMBA=1`` to force the pure numpy/python path (used by
the benchmark and to debug kernels).  Both paths must return identical
results; the test-suite runs the fallback in a subprocess to check that.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("COUNTGNN_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def _jit(fn):
    if HAS_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# backtracking embedding counter


@_jit
def _edge_multiplicity(ptr, nbr, lab, mult, a, b, label):
    # neighbour lists are sorted by (nbr, label): binary search for b
    lo = ptr[a]
    hi = ptr[a + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        if nbr[mid] < b or (nbr[mid] == b and lab[mid] < label):
            lo = mid + 1
        else:
            hi = mid
    if lo < ptr[a + 1] and nbr[lo] == b and lab[lo] == label:
        return mult[lo]
    return 0


@_jit
def count_embeddings_kernel(
    q_label,
    q_in_deg,
    q_out_deg,
    parent_pos,
    parent_dir,
    con_ptr,
    con_other,
    con_dir,
    con_label,
    con_mult,
    g_label,
    g_in_deg,
    g_out_deg,
    out_ptr,
    out_nbr,
    out_lab,
    out_mult,
    in_ptr,
    in_nbr,
    in_lab,
    in_mult,
    budget,
):
    """Count weighted embeddings by iterative depth-first search.

    Query arrays are indexed by *position* in the matching order.  For each
    position ``k`` the constraint rows ``con_ptr[k]:con_ptr[k+1]`` list the
    distinct labelled query edges between ``k`` and an earlier position (or
    ``k`` itself for loops); ``con_dir == 0`` means the edge leaves ``k``.
    Returns ``(count, steps, exhausted)``.
    """
    nq = q_label.shape[0]
    ng = g_label.shape[0]
    mapping = np.full(nq, -1, dtype=np.int64)
    weight = np.zeros(nq, dtype=np.int64)
    it = np.zeros(nq, dtype=np.int64)
    start = np.zeros(nq, dtype=np.int64)
    end = np.zeros(nq, dtype=np.int64)
    used = np.zeros(ng, dtype=np.bool_)
    count = 0
    steps = 0

    k = 0
    if parent_pos[0] >= 0:
        return 0, 0, False
    it[0] = 0
    start[0] = 0
    end[0] = ng
    while k >= 0:
        descended = False
        while it[k] < end[k]:
            j = it[k]
            it[k] = j + 1
            p = parent_pos[k]
            if p < 0:
                c = j
            elif parent_dir[k] == 0:
                c = out_nbr[j]
                if j > start[k] and out_nbr[j - 1] == c:
                    continue
            else:
                c = in_nbr[j]
                if j > start[k] and in_nbr[j - 1] == c:
                    continue
            steps += 1
            if steps > budget:
                return count, steps, True
            if used[c] or g_label[c] != q_label[k]:
                continue
            if g_in_deg[c] < q_in_deg[k] or g_out_deg[c] < q_out_deg[k]:
                continue
            w = 1 if k == 0 else weight[k - 1]
            ok = True
            for r in range(con_ptr[k], con_ptr[k + 1]):
                o = con_other[r]
                other = c if o == k else mapping[o]
                if con_dir[r] == 0:
                    m = _edge_multiplicity(out_ptr, out_nbr, out_lab, out_mult, c, other, con_label[r])
                else:
                    m = _edge_multiplicity(out_ptr, out_nbr, out_lab, out_mult, other, c, con_label[r])
                need = con_mult[r]
                if m < need:
                    ok = False
                    break
                for t in range(need):
                    w *= m - t
            if not ok:
                continue
            if k == nq - 1:
                count += w
                continue
            mapping[k] = c
            weight[k] = w
            used[c] = True
            k += 1
            p = parent_pos[k]
            if p < 0:
                start[k] = 0
                end[k] = ng
            elif parent_dir[k] == 0:
                start[k] = out_ptr[mapping[p]]
                end[k] = out_ptr[mapping[p] + 1]
            else:
                start[k] = in_ptr[mapping[p]]
                end[k] = in_ptr[mapping[p] + 1]
            it[k] = start[k]
            descended = True
            break
        if not descended:
            k -= 1
            if k >= 0:
                used[mapping[k]] = False
                mapping[k] = -1
    return count, steps, False


# ---------------------------------------------------------------------------
# sparse row operators (aggregation, readout, gather and their adjoints)

if HAS_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def csr_matmul(indptr, indices, data, x, n_rows):
        """Dense product ``S @ x`` for a CSR matrix ``S`` with ``n_rows`` rows."""
        out = np.zeros((n_rows, x.shape[1]), dtype=np.float64)
        for i in range(n_rows):
            for j in range(indptr[i], indptr[i + 1]):
                w = data[j]
                src = indices[j]
                for c in range(x.shape[1]):
                    out[i, c] += w * x[src, c]
        return out

else:

    def csr_matmul(indptr, indices, data, x, n_rows):
        """Dense product ``S @ x`` for a CSR matrix ``S`` with ``n_rows`` rows."""
        out = np.zeros((n_rows, x.shape[1]), dtype=np.float64)
        if indices.size == 0:
            return out
        weighted = data[:, None] * x[indices]
        nonempty = np.flatnonzero(np.diff(indptr))
        out[nonempty] = np.add.reduceat(weighted, indptr[nonempty], axis=0)
        return out
