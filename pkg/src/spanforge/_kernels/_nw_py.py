"""Pure-Python Needleman–Wunsch kernel.

Reference implementation and import-time fallback for the compiled kernel.
Both backends must produce identical output: the dynamic program breaks
score ties in the fixed order diagonal > up > left during traceback.
"""

from __future__ import annotations

import numpy as np

#: code emitted for a gap column in the aligned outputs
GAP_CODE = -1


def align_global(
    a: np.ndarray,
    b: np.ndarray,
    substitution: np.ndarray,
    gap: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Globally align two code sequences.

    ``a``/``b`` are int32 symbol codes indexing ``substitution`` (a square
    float64 matrix); ``gap`` is the per-column gap score.  Returns the optimal
    score plus the two aligned code arrays, ``GAP_CODE`` marking gaps.
    """
    m, n = len(a), len(b)
    sub = substitution.tolist()
    gap = float(gap)
    a_codes = [int(x) for x in a]
    b_codes = [int(x) for x in b]
    prev = [j * gap for j in range(n + 1)]
    rows = [prev]
    for i in range(1, m + 1):
        row = [i * gap] + [0.0] * n
        sub_row = sub[a_codes[i - 1]]
        for j in range(1, n + 1):
            diag = prev[j - 1] + sub_row[b_codes[j - 1]]
            up = prev[j] + gap
            left = row[j - 1] + gap
            best = diag
            if up > best:
                best = up
            if left > best:
                best = left
            row[j] = best
        rows.append(row)
        prev = row

    out_a: list[int] = []
    out_b: list[int] = []
    i, j = m, n
    while i > 0 or j > 0:
        here = rows[i][j]
        if i > 0 and j > 0 and here == rows[i - 1][j - 1] + sub[a_codes[i - 1]][b_codes[j - 1]]:
            out_a.append(a_codes[i - 1])
            out_b.append(b_codes[j - 1])
            i -= 1
            j -= 1
        elif i > 0 and here == rows[i - 1][j] + gap:
            out_a.append(a_codes[i - 1])
            out_b.append(GAP_CODE)
            i -= 1
        else:
            out_a.append(GAP_CODE)
            out_b.append(b_codes[j - 1])
            j -= 1
    out_a.reverse()
    out_b.reverse()
    return float(rows[m][n]), np.array(out_a, dtype=np.int32), np.array(out_b, dtype=np.int32)
