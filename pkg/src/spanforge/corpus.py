"""Residue vocabulary, sequence records, and file ingestion.

The vocabulary covers the 20 canonical amino acids plus the five ambiguous /
non-standard symbols (X, B, Z, U, O), a pad token, an end-of-sequence token,
and a pool of 128 mask-placeholder ("sentinel") tokens used by the corruption
pipeline.  Ids are assigned deterministically: pad=0, eos=1, residues 2..26 in
the order below, sentinels descending from the top of the id range
(sentinel_0 is the largest id).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CANONICAL_RESIDUES = "ACDEFGHIKLMNPQRSTVWY"
EXTENDED_RESIDUES = "XBZUO"
RESIDUES = CANONICAL_RESIDUES + EXTENDED_RESIDUES

PAD = "<pad>"
EOS = "<eos>"
NUM_SENTINELS = 128
GAP = "-"


class CorpusError(Exception):
    """Base class for ingestion and tokenization failures."""


class UnknownSymbolError(CorpusError):
    def __init__(self, symbol: str, position: int):
        self.symbol = symbol
        self.position = position
        super().__init__(f"unknown residue symbol {symbol!r} at position {position}")


class EmptyInputError(CorpusError):
    pass


class MalformedFastaError(CorpusError):
    pass


class MalformedCoordsError(CorpusError):
    pass


class NoCaAtomsError(CorpusError):
    pass


class Vocabulary:
    """Fixed bijective mapping between token symbols and integer ids."""

    def __init__(self) -> None:
        self.pad_id = 0
        self.eos_id = 1
        self._residue_to_id = {r: 2 + i for i, r in enumerate(RESIDUES)}
        self._id_to_residue = {i: r for r, i in self._residue_to_id.items()}
        self.num_sentinels = NUM_SENTINELS
        self.size = 2 + len(RESIDUES) + NUM_SENTINELS
        # sentinel_0 sits at the top of the id range, sentinel_k below it
        self._sentinel_base = self.size - 1

    @property
    def residue_tokens(self) -> str:
        return RESIDUES

    def residue_id(self, symbol: str) -> int:
        try:
            return self._residue_to_id[symbol]
        except KeyError:
            raise UnknownSymbolError(symbol, -1) from None

    def sentinel_id(self, k: int) -> int:
        # the pool wraps so arbitrarily many runs stay representable
        return self._sentinel_base - (k % self.num_sentinels)

    def is_residue(self, token_id: int) -> bool:
        return 2 <= token_id < 2 + len(RESIDUES)

    def is_sentinel(self, token_id: int) -> bool:
        return self._sentinel_base - self.num_sentinels < token_id <= self._sentinel_base

    def encode(self, sequence: str, allow_empty: bool = False) -> list[int]:
        """Map a residue string to token ids, one id per character."""
        if not sequence:
            if allow_empty:
                return []
            raise EmptyInputError("cannot encode an empty sequence")
        ids = []
        for pos, ch in enumerate(sequence):
            try:
                ids.append(self._residue_to_id[ch])
            except KeyError:
                raise UnknownSymbolError(ch, pos) from None
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode`; only residue ids are accepted."""
        chars = []
        for pos, i in enumerate(ids):
            try:
                chars.append(self._id_to_residue[i])
            except KeyError:
                raise UnknownSymbolError(str(i), pos) from None
        return "".join(chars)

    def token_str(self, token_id: int) -> str:
        """Human-readable rendering used by pair dumps and debugging."""
        if token_id == self.pad_id:
            return PAD
        if token_id == self.eos_id:
            return EOS
        if self.is_residue(token_id):
            return self._id_to_residue[token_id]
        if self.is_sentinel(token_id):
            return f"<mask_{self._sentinel_base - token_id}>"
        raise UnknownSymbolError(str(token_id), -1)


VOCAB = Vocabulary()


@dataclass
class SequenceRecord:
    """An identified amino-acid sequence plus optional labels/coordinates."""

    id: str
    sequence: str
    label: str | None = None
    residue_labels: str | None = None
    coords: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if len(self.sequence) < 1:
            raise EmptyInputError(f"record {self.id!r} has an empty sequence")
        for pos, ch in enumerate(self.sequence):
            if ch not in VOCAB._residue_to_id:
                raise UnknownSymbolError(ch, pos)
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64)
            if len(self.coords) != len(self.sequence):
                raise MalformedCoordsError(
                    f"record {self.id!r}: {len(self.coords)} coordinates for "
                    f"{len(self.sequence)} residues"
                )
        if self.residue_labels is not None and len(self.residue_labels) != len(self.sequence):
            raise MalformedFastaError(
                f"record {self.id!r}: per-residue label length mismatch"
            )

    def __len__(self) -> int:
        return len(self.sequence)


def clip_record(record: SequenceRecord, max_length: int) -> SequenceRecord:
    """Truncate an over-long record with a warning instead of rejecting it."""
    if len(record) <= max_length:
        return record
    warnings.warn(
        f"record {record.id!r} truncated from {len(record)} to {max_length} residues",
        stacklevel=2,
    )
    return SequenceRecord(
        id=record.id,
        sequence=record.sequence[:max_length],
        label=record.label,
        residue_labels=None if record.residue_labels is None else record.residue_labels[:max_length],
        coords=None if record.coords is None else record.coords[:max_length],
    )


def parse_fasta(path) -> list[SequenceRecord]:
    """Read a FASTA file into records, one per header, order preserved."""
    records: list[SequenceRecord] = []
    header: str | None = None
    body: list[str] = []

    def flush() -> None:
        if header is None:
            return
        seq = "".join(body)
        if not seq:
            raise MalformedFastaError(f"record {header!r} has an empty body")
        records.append(SequenceRecord(id=header, sequence=seq))

    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith(">"):
                flush()
                header = line[1:].split()[0] if line[1:].strip() else line[1:]
                body = []
            else:
                if header is None:
                    raise MalformedFastaError(f"line {lineno}: sequence body before any header")
                body.append(line)
    flush()
    return records


def write_fasta(records: Sequence[SequenceRecord], path, width: int = 60) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(f">{rec.id}\n")
            for start in range(0, len(rec.sequence), width):
                fh.write(rec.sequence[start : start + width] + "\n")


def read_alignment(path) -> list[str]:
    """Read a gapped FASTA/A2M alignment as uppercase rows with '-' gaps."""
    rows: list[str] = []
    body: list[str] = []
    started = False
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith(">"):
                if started:
                    rows.append("".join(body))
                started = True
                body = []
            else:
                if not started:
                    raise MalformedFastaError("alignment body before any header")
                body.append(line.replace(".", GAP).upper())
    if started:
        rows.append("".join(body))
    return rows


def _parse_xyz(lines: list[str]) -> np.ndarray:
    points = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) != 3:
            raise MalformedCoordsError(f"line {lineno}: expected 'x y z', got {line!r}")
        try:
            points.append([float(p) for p in parts])
        except ValueError:
            raise MalformedCoordsError(f"line {lineno}: non-numeric coordinate in {line!r}") from None
    if not points:
        raise MalformedCoordsError("coordinate file is empty")
    return np.asarray(points, dtype=np.float64)


def _parse_pdb_ca(lines: list[str]) -> np.ndarray:
    # Intentionally minimal: first model, one chain, CA atoms, altLoc ' ' or 'A'.
    points = []
    chain: str | None = None
    for line in lines:
        if line.startswith("ENDMDL"):
            break
        if not line.startswith("ATOM"):
            continue
        if line[12:16].strip() != "CA":
            continue
        if line[16] not in (" ", "A"):
            continue
        if chain is None:
            chain = line[21]
        elif line[21] != chain:
            continue
        try:
            xyz = [float(line[30:38]), float(line[38:46]), float(line[46:54])]
        except ValueError:
            raise MalformedCoordsError(f"unparseable ATOM coordinates: {line.rstrip()!r}") from None
        points.append(xyz)
    if not points:
        raise NoCaAtomsError("no CA ATOM records found")
    return np.asarray(points, dtype=np.float64)


def parse_coords(path) -> np.ndarray:
    """Read 3D points from either plain 'x y z' text or PDB ATOM records."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if any(ln.startswith(("ATOM", "HETATM", "MODEL", "HEADER", "TER", "END")) for ln in lines):
        return _parse_pdb_ca(lines)
    return _parse_xyz(lines)


def load_labels(path) -> dict[str, str]:
    """Read a tab-separated 'id<TAB>label' file; labels stay raw strings."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise MalformedFastaError(f"line {lineno}: expected 'id<TAB>label'")
            key, value = line.split("\t", 1)
            out[key] = value
    return out
