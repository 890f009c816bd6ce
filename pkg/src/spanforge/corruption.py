"""Span-corruption strategy matrix: token sequence -> (input, target) pair.

Eight strategies are supported.  They differ along three axes: how mask
positions are chosen (uniform vs coverage-first vs window-expanded), how the
input renders masks (one sentinel per masked position vs one per masked run),
and how the target is built (full sequence, masked-only loss, unmasked runs
collapsed to sentinels, or everything collapsed to sentinels).

S0  uniform positions, per-position input sentinels, full-sequence target
S1  coverage-first positions, otherwise as S0
S2  coverage-first, each position expanded to a +/-1 window
S3  as S1, but the loss is applied only at masked target positions
S4  uniform positions; target collapses each unmasked run to a sentinel and
    keeps masked tokens literal
S5  as S4 with coverage-first selection
S6_literal  input collapses masked runs; target is sentinels only
S6_span     input collapses masked runs; target keeps masked-run content

All strategies are deterministic functions of (sequence, spec).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from spanforge.corpus import VOCAB


class CorruptionError(Exception):
    pass


class IndexOutOfRangeError(CorruptionError):
    pass


class NotInvertibleError(CorruptionError):
    pass


class Strategy(str, Enum):
    S0 = "S0"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"
    S5 = "S5"
    S6_LITERAL = "S6_literal"
    S6_SPAN = "S6_span"


#: strategies whose input carries one sentinel per masked position
PER_POSITION_INPUT = frozenset(
    {Strategy.S0, Strategy.S1, Strategy.S2, Strategy.S3, Strategy.S4, Strategy.S5}
)
#: strategies that choose positions coverage-first
COVERAGE_FIRST = frozenset({Strategy.S1, Strategy.S2, Strategy.S3, Strategy.S5})


@dataclass(frozen=True)
class CorruptionSpec:
    strategy: Strategy
    probability: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0.0 < self.probability < 1.0:
            raise ValueError(f"masking probability must lie in (0, 1), got {self.probability}")


@dataclass
class MaskedPair:
    input_ids: list[int]
    target_ids: list[int]
    loss_mask: list[bool]
    mask_positions: list[int]
    strategy: Strategy
    masked_fraction: float = field(default=0.0)

    def __post_init__(self) -> None:
        if len(self.loss_mask) != len(self.target_ids):
            raise ValueError("loss_mask must align with target_ids")
        for a, b in zip(self.mask_positions, self.mask_positions[1:]):
            if b <= a:
                raise ValueError("mask_positions must be strictly increasing")


def mask_count(length: int, probability: float) -> int:
    """Number of positions to mask: round-half-up of p*L, at least 1."""
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    return max(1, int(np.floor(probability * length + 0.5)))


def _coverage_first(seq: list[int], budget: int, rng: np.random.Generator) -> list[int]:
    # Mask one occurrence of every distinct symbol except the most frequent
    # one (ties broken toward the lowest id), then spend the rest uniformly.
    counts = Counter(seq)
    top = max(counts.values())
    skip = min(sym for sym, c in counts.items() if c == top)
    order = rng.permutation(len(seq))
    selected: list[int] = []
    chosen = set()
    covered = set()
    for i in order:
        if len(selected) == budget:
            break
        sym = seq[i]
        if sym == skip or sym in covered:
            continue
        covered.add(sym)
        chosen.add(int(i))
        selected.append(int(i))
    for i in order:
        if len(selected) == budget:
            break
        if int(i) not in chosen:
            chosen.add(int(i))
            selected.append(int(i))
    return selected


def select_indices(seq: list[int], spec: CorruptionSpec, rng: np.random.Generator) -> list[int]:
    """Choose the positions to mask, sorted ascending."""
    if not seq:
        raise ValueError("cannot select mask positions in an empty sequence")
    budget = mask_count(len(seq), spec.probability)
    if spec.strategy in COVERAGE_FIRST:
        picked = _coverage_first(seq, budget, rng)
        if spec.strategy is Strategy.S2:
            expanded = set()
            for i in picked:
                expanded.update(j for j in (i - 1, i, i + 1) if 0 <= j < len(seq))
            return sorted(expanded)
        return sorted(picked)
    return sorted(int(i) for i in rng.permutation(len(seq))[:budget])


def _runs(length: int, masked: set[int]) -> list[tuple[bool, int, int]]:
    """Maximal runs as (is_masked, start, end) with end exclusive."""
    runs = []
    start = 0
    for i in range(1, length + 1):
        if i == length or (i in masked) != (start in masked):
            runs.append((start in masked, start, i))
            start = i
    return runs


def build_pair(seq: list[int], indices: list[int], strategy: Strategy) -> MaskedPair:
    """Render a masked training pair from a sequence and chosen positions."""
    strategy = Strategy(strategy)
    length = len(seq)
    for i in indices:
        if not 0 <= i < length:
            raise IndexOutOfRangeError(f"mask index {i} out of range for length {length}")
    positions = sorted(set(indices))
    masked = set(positions)
    eos = VOCAB.eos_id

    if strategy in PER_POSITION_INPUT:
        input_ids = []
        k = 0
        for pos, tok in enumerate(seq):
            if pos in masked:
                input_ids.append(VOCAB.sentinel_id(k))
                k += 1
            else:
                input_ids.append(tok)
    else:
        input_ids = []
        k = 0
        for is_masked, start, end in _runs(length, masked):
            if is_masked:
                input_ids.append(VOCAB.sentinel_id(k))
                k += 1
            else:
                input_ids.extend(seq[start:end])

    if strategy in (Strategy.S0, Strategy.S1, Strategy.S2, Strategy.S3):
        target_ids = list(seq)
        if strategy is Strategy.S3:
            loss_mask = [pos in masked for pos in range(length)] + [False]
        else:
            loss_mask = [True] * (length + 1)
    elif strategy in (Strategy.S4, Strategy.S5, Strategy.S6_SPAN):
        target_ids = []
        t = 0
        for is_masked, start, end in _runs(length, masked):
            if is_masked:
                target_ids.extend(seq[start:end])
            else:
                target_ids.append(VOCAB.sentinel_id(t))
                t += 1
        loss_mask = [True] * (len(target_ids) + 1)
    else:  # S6_literal: one sentinel per run, no residue content at all
        target_ids = []
        for t, _run in enumerate(_runs(length, masked)):
            target_ids.append(VOCAB.sentinel_id(t))
        loss_mask = [True] * (len(target_ids) + 1)

    input_ids.append(eos)
    target_ids.append(eos)
    return MaskedPair(
        input_ids=input_ids,
        target_ids=target_ids,
        loss_mask=loss_mask,
        mask_positions=positions,
        strategy=strategy,
        masked_fraction=len(positions) / length,
    )


def corrupt(seq: list[int], spec: CorruptionSpec) -> MaskedPair:
    """Seeded end-to-end corruption: select positions, then build the pair."""
    rng = np.random.default_rng(spec.seed)
    return build_pair(seq, select_indices(seq, spec, rng), spec.strategy)


def invert(pair: MaskedPair, original_hint: list[int] | None = None) -> list[int]:
    """Reconstruct the original sequence from a masked pair.

    Works for every strategy except S6_literal, whose target carries no
    residue content.
    """
    if pair.strategy is Strategy.S6_LITERAL:
        raise NotInvertibleError("S6_literal targets contain no residue tokens")
    eos = VOCAB.eos_id
    inp = [t for t in pair.input_ids if t != eos]
    tgt = [t for t in pair.target_ids if t != eos]

    if pair.strategy in (Strategy.S0, Strategy.S1, Strategy.S2, Strategy.S3):
        restored = tgt
    elif pair.strategy in (Strategy.S4, Strategy.S5):
        literals = iter(t for t in tgt if not VOCAB.is_sentinel(t))
        restored = [next(literals) if VOCAB.is_sentinel(t) else t for t in inp]
    else:  # S6_span: input sentinels mark whole runs, splice chunks back in
        chunks: list[list[int]] = []
        current: list[int] = []
        for t in tgt:
            if VOCAB.is_sentinel(t):
                if current:
                    chunks.append(current)
                    current = []
            else:
                current.append(t)
        if current:
            chunks.append(current)
        chunk_iter = iter(chunks)
        restored = []
        for t in inp:
            if VOCAB.is_sentinel(t):
                restored.extend(next(chunk_iter))
            else:
                restored.append(t)

    if original_hint is not None and len(restored) != len(original_hint):
        raise NotInvertibleError(
            f"reconstructed length {len(restored)} != hint length {len(original_hint)}"
        )
    return restored


def render_pair(pair: MaskedPair) -> str:
    """Token-per-line dump of a pair for inspection files."""
    lines = ["# input"]
    lines.extend(VOCAB.token_str(t) for t in pair.input_ids)
    lines.append("# target")
    for tok, active in zip(pair.target_ids, pair.loss_mask):
        lines.append(f"{VOCAB.token_str(tok)}\t{int(active)}")
    return "\n".join(lines) + "\n"
