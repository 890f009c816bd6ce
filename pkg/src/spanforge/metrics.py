"""Quantitative evaluation: entropy profiles, alignment identity, RMSD,
contact precision, Q-accuracy, Spearman rank correlation.

All functions are pure.  Alignment runs on the compiled kernel when it is
available (see spanforge._kernels); everything else is plain numpy.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .corpus import SequenceRecord

GAP = "-"


class MetricError(Exception):
    """Base class for evaluation errors."""


class RaggedAlignmentError(MetricError):
    """Alignment rows have differing lengths."""


class LengthMismatchError(MetricError):
    """Paired inputs differ in length (or are too short)."""


class EmptySequenceError(MetricError):
    """An alignment input is empty."""


class TooFewSequencesError(MetricError):
    """Pairwise statistics need at least two sequences."""


class DegenerateConfigurationError(MetricError):
    """Point set covariance has rank < 2; the rotation is underdetermined."""


class NoEligiblePairsError(MetricError):
    """No residue pair passes the separation filter."""


class ConstantInputError(MetricError):
    """Rank correlation is undefined for a constant vector."""


# -- entropy -------------------------------------------------------------------


def _row_text(row) -> str:
    return row.sequence if isinstance(row, SequenceRecord) else str(row)


def shannon_profile(aligned_sequences, count_gaps: bool = True) -> np.ndarray:
    """Per-column Shannon entropy (bits) of an aligned set.

    Gaps count as a 21st symbol unless ``count_gaps`` is False, in which case
    they are dropped from the column (an all-gap column scores 0).
    """
    rows = [_row_text(r) for r in aligned_sequences]
    if not rows:
        raise RaggedAlignmentError("need at least one aligned row")
    width = len(rows[0])
    for r in rows:
        if len(r) != width:
            raise RaggedAlignmentError(
                f"aligned rows must share one length; saw {len(r)} and {width}"
            )
    profile = np.zeros(width, dtype=np.float64)
    for col in range(width):
        symbols = [r[col] for r in rows]
        if not count_gaps:
            symbols = [s for s in symbols if s != GAP]
        if not symbols:
            continue
        counts = np.array(list(Counter(symbols).values()), dtype=np.float64)
        p = counts / counts.sum()
        profile[col] = float(-(p * np.log2(p)).sum())
    return profile


def entropy_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference between two entropy profiles."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatchError(f"profile shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# -- alignment identity ---------------------------------------------------------


@dataclass(frozen=True)
class AlignmentScoring:
    """Linear-gap scoring scheme.  ``matrix`` (symbol-pair -> score) overrides
    match/mismatch for the pairs it covers; pairs it omits fall back."""

    match: float = 1.0
    mismatch: float = 0.0
    gap: float = 0.0
    matrix: Mapping[tuple[str, str], float] | None = None

    @classmethod
    def from_matrix_file(cls, path, gap: float = 0.0) -> "AlignmentScoring":
        """Load a whitespace table (header row of symbols, one labelled row per
        symbol, '#' comments) such as a BLOSUM file."""
        lines = [
            ln for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")
        ]
        header = lines[0].split()
        table: dict[tuple[str, str], float] = {}
        for ln in lines[1:]:
            parts = ln.split()
            row_symbol, values = parts[0], parts[1:]
            for col_symbol, value in zip(header, values):
                table[(row_symbol, col_symbol)] = float(value)
        return cls(gap=gap, matrix=table)


@dataclass(frozen=True)
class AlignmentResult:
    aligned_a: str
    aligned_b: str
    score: float
    matches: int
    alignment_length: int
    identity: float


def _substitution_table(scoring: AlignmentScoring) -> np.ndarray:
    table = np.full((128, 128), scoring.mismatch, dtype=np.float64)
    np.fill_diagonal(table, scoring.match)
    if scoring.matrix:
        for (x, y), value in scoring.matrix.items():
            xi, yi = ord(x), ord(y)
            if xi > 127 or yi > 127:
                raise ValueError(f"non-ASCII symbol in scoring matrix: {x!r}/{y!r}")
            table[xi, yi] = value
            table[yi, xi] = value
    return table


def _encode_ascii(sequence: str) -> np.ndarray:
    return np.frombuffer(sequence.encode("ascii"), dtype=np.uint8).astype(np.int32)


def global_identity(
    a,
    b,
    scoring: AlignmentScoring | None = None,
    denominator: str = "alignment",
    _table: np.ndarray | None = None,
) -> AlignmentResult:
    """Needleman-Wunsch global alignment and the identity it implies.

    Default scoring is match=1 / mismatch=0 / gap=0, under which the optimal
    score equals the maximum attainable match count.  ``denominator`` selects
    what identity divides by: the full alignment length (default) or
    "shorter", the shorter input length.
    """
    a_text = _row_text(a)
    b_text = _row_text(b)
    if not a_text or not b_text:
        raise EmptySequenceError("cannot align an empty sequence")
    scoring = scoring or AlignmentScoring()
    table = _table if _table is not None else _substitution_table(scoring)
    score, ga, gb = _kernels.align_global(
        _encode_ascii(a_text), _encode_ascii(b_text), table, scoring.gap
    )
    matches = int(np.sum((ga == gb) & (ga >= 0)))
    aligned_a = "".join(GAP if c < 0 else chr(c) for c in ga)
    aligned_b = "".join(GAP if c < 0 else chr(c) for c in gb)
    if denominator == "alignment":
        denom = len(aligned_a)
    elif denominator == "shorter":
        denom = min(len(a_text), len(b_text))
    else:
        raise ValueError(f"unknown identity denominator {denominator!r}")
    return AlignmentResult(
        aligned_a=aligned_a,
        aligned_b=aligned_b,
        score=score,
        matches=matches,
        alignment_length=len(aligned_a),
        identity=matches / denom,
    )


@dataclass(frozen=True)
class IdentitySummary:
    mean: float
    histogram: np.ndarray
    bin_edges: np.ndarray
    pair_count: int


def internal_identity(
    sequences,
    sample_size: int | None = None,
    seed: int = 0,
    bins: int = 10,
    scoring: AlignmentScoring | None = None,
) -> IdentitySummary:
    """Pairwise identity distribution inside one set: all pairs, or a seeded
    uniform sample of pairs when there are more than ``sample_size``."""
    texts = [_row_text(s) for s in sequences]
    if len(texts) < 2:
        raise TooFewSequencesError(f"need >= 2 sequences, got {len(texts)}")
    scoring = scoring or AlignmentScoring()
    table = _substitution_table(scoring)
    pairs = list(combinations(range(len(texts)), 2))
    if sample_size is not None and len(pairs) > sample_size:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(pairs), size=sample_size, replace=False)
        pairs = [pairs[i] for i in sorted(keep)]
    identities = np.array(
        [
            global_identity(texts[i], texts[j], scoring, _table=table).identity
            for i, j in pairs
        ],
        dtype=np.float64,
    )
    histogram, bin_edges = np.histogram(identities, bins=bins, range=(0.0, 1.0))
    return IdentitySummary(
        mean=float(identities.mean()),
        histogram=histogram,
        bin_edges=bin_edges,
        pair_count=len(pairs),
    )


# -- structure -----------------------------------------------------------------


def kabsch_rmsd(coords_a, coords_b) -> float:
    """RMSD after optimal rigid superposition (centroid shift + SVD rotation,
    reflections removed via the determinant sign).

    Requires >= 3 paired 3-D points whose covariance has rank >= 2 (planar
    sets are fine; collinear or coincident ones are rejected because the
    sign rule cannot pick a rotation).
    """
    p = np.asarray(coords_a, dtype=np.float64)
    q = np.asarray(coords_b, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or q.ndim != 2 or q.shape[1] != 3:
        raise LengthMismatchError("coordinates must be (n, 3) arrays")
    if p.shape != q.shape:
        raise LengthMismatchError(f"point counts differ: {p.shape[0]} vs {q.shape[0]}")
    if p.shape[0] < 3:
        raise LengthMismatchError("superposition needs at least 3 points")
    p = p - p.mean(axis=0)
    q = q - q.mean(axis=0)
    cov = p.T @ q
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= max(s[0], 1.0) * 1e-12:
        raise DegenerateConfigurationError(
            "covariance rank < 2: configuration does not pin down a rotation"
        )
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    diff = p @ rotation.T - q
    return float(np.sqrt((diff**2).sum() / p.shape[0]))


# -- contacts --------------------------------------------------------------------


def contacts_from_distances(distances, threshold: float = 8.0) -> np.ndarray:
    """Boolean contact map from a pairwise distance matrix (contact iff
    distance < threshold, diagonal excluded)."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    contacts = d < threshold
    np.fill_diagonal(contacts, False)
    return contacts


def parse_contact_pairs(text: str, length: int) -> np.ndarray:
    """Symmetric boolean contact map from "i j" lines (0-based indices,
    '#' comments allowed)."""
    contacts = np.zeros((length, length), dtype=bool)
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        i_str, j_str = line.split()
        i, j = int(i_str), int(j_str)
        if not (0 <= i < length and 0 <= j < length):
            raise ValueError(f"contact pair ({i}, {j}) outside length {length}")
        contacts[i, j] = contacts[j, i] = True
    return contacts


def contact_precision(
    scores,
    truth,
    divisor: int = 1,
    min_separation: int = 6,
) -> float:
    """Precision of the top-k scored long-range pairs, k = max(1, floor(L/divisor)).

    Pairs are the upper triangle with |i - j| >= min_separation; ties in score
    break toward the smaller (i, j).  When fewer than k pairs are eligible the
    denominator shrinks to the eligible count, keeping the all-true case at 1.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=bool)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("score matrix must be square")
    if t.shape != s.shape:
        raise LengthMismatchError(f"truth shape {t.shape} != scores shape {s.shape}")
    length = s.shape[0]
    eligible = [
        (i, j)
        for i in range(length)
        for j in range(i + min_separation, length)
    ]
    if not eligible:
        raise NoEligiblePairsError(
            f"no pair at separation >= {min_separation} in length {length}"
        )
    k = min(max(1, length // divisor), len(eligible))
    ranked = sorted(eligible, key=lambda ij: (-s[ij], ij))
    hits = sum(bool(t[ij]) for ij in ranked[:k])
    return hits / k


# -- labels ----------------------------------------------------------------------


def q_accuracy(predicted: Sequence, truth: Sequence, ignore_label=None) -> float:
    """Exact-match fraction of per-residue labels, skipping positions whose
    true label equals ``ignore_label``."""
    if len(predicted) != len(truth):
        raise LengthMismatchError(
            f"label lengths differ: {len(predicted)} vs {len(truth)}"
        )
    scored = [(p, t) for p, t in zip(predicted, truth) if t != ignore_label]
    if not scored:
        raise ValueError("every position carries the ignore label")
    return sum(p == t for p, t in scored) / len(scored)


# -- correlation -------------------------------------------------------------------


def fractional_ranks(values) -> np.ndarray:
    """1-based ranks with ties averaged."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    sorted_values = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rho: Pearson correlation of fractional ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatchError(f"input shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 1 or len(x) < 2:
        raise LengthMismatchError("need two 1-D vectors of length >= 2")
    rx = fractional_ranks(x)
    ry = fractional_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    if denom == 0.0:
        raise ConstantInputError("rank correlation is undefined for constant input")
    return float((rx * ry).sum() / denom)
