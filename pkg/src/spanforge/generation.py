"""Sequence generation: temperature-warped beam search, family generation
from a frozen-encoder fine-tuned model, and one-shot masked infilling.

Beam search is written against a plain step function (decoded prefix ->
next-token logits), which keeps it decodable against rigged fixtures in tests
and lets infilling constrain the structure of the decoded target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spanforge import autograd as ag
from spanforge.corpus import VOCAB, SequenceRecord
from spanforge.corruption import CorruptionSpec, MaskedPair, Strategy, build_pair, select_indices
from spanforge.model import ModelConfig, ParameterStore, decoder_forward, encoder_forward

RESIDUE_IDS = frozenset(range(2, 2 + 25))


class GenerationError(Exception):
    pass


class NonPositiveTemperatureError(GenerationError):
    pass


class SpliceMismatchError(GenerationError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    num_beams: int = 10
    temperature: float = 1.0
    max_length: int = 256
    prompt_length: int = 20
    mask_probability: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise NonPositiveTemperatureError(f"temperature must be > 0, got {self.temperature}")
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")
        if self.prompt_length > self.max_length:
            raise ValueError("prompt_length must not exceed max_length")


def warp_logits(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Divide logits by temperature; order-preserving for any T > 0."""
    if temperature <= 0:
        raise NonPositiveTemperatureError(f"temperature must be > 0, got {temperature}")
    return np.asarray(logits, dtype=np.float64) / temperature


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class Beam:
    tokens: list[int]
    score: float
    finished: bool


def beam_search(
    step_fn,
    cfg: GenerationConfig,
    max_steps: int | None = None,
    allowed_fn=None,
    eos_id: int = VOCAB.eos_id,
) -> list[tuple[list[int], float]]:
    """Length-bounded beam search over ``step_fn(prefix) -> (vocab,) logits``.

    Scores accumulate temperature-warped log-probabilities with no length
    normalization.  ``allowed_fn(step_index)`` may return a set of permitted
    token ids for that step (used by constrained infilling); by default every
    id except pad and the sentinels is permitted, so outputs are residue/eos
    strings.  Ties break toward the lexicographically smaller token list, so
    results are fully deterministic.
    """
    limit = cfg.max_length if max_steps is None else max_steps
    default_blocked: dict[int, np.ndarray] = {}

    def blocked_ids(vocab: int, allowed) -> np.ndarray:
        if allowed is not None:
            keep = np.zeros(vocab, dtype=bool)
            keep[list(allowed)] = True
            return ~keep
        if vocab not in default_blocked:
            mask = np.zeros(vocab, dtype=bool)
            for banned in [VOCAB.pad_id] + [VOCAB.sentinel_id(k) for k in range(VOCAB.num_sentinels)]:
                if banned < vocab:
                    mask[banned] = True
            default_blocked[vocab] = mask
        return default_blocked[vocab]

    beams = [Beam(tokens=[], score=0.0, finished=False)]
    for step in range(limit):
        if all(b.finished for b in beams):
            break
        candidates: list[Beam] = []
        for beam in beams:
            if beam.finished:
                candidates.append(beam)
                continue
            logits = np.asarray(step_fn(beam.tokens), dtype=np.float64).copy()
            blocked = blocked_ids(logits.shape[0], allowed_fn(step) if allowed_fn else None)
            logits[blocked] = -np.inf
            log_probs = _log_softmax(warp_logits(logits, cfg.temperature))
            for token_id in np.flatnonzero(~blocked):
                token_id = int(token_id)
                candidates.append(
                    Beam(
                        tokens=beam.tokens + [token_id],
                        score=beam.score + float(log_probs[token_id]),
                        finished=token_id == eos_id,
                    )
                )
        candidates.sort(key=lambda b: (-b.score, b.tokens))
        beams = candidates[: cfg.num_beams]
    beams.sort(key=lambda b: (-b.score, b.tokens))
    return [(b.tokens, b.score) for b in beams]


def decoder_step_fn(config: ModelConfig, params: ParameterStore, encoder_input_ids):
    """Build a beam-search step function around one encoded input."""
    ids = np.asarray(encoder_input_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    with ag.no_grad():
        encoded = encoder_forward(ids, None, config, params)

    def step(prefix: list[int]) -> np.ndarray:
        decoder_ids = np.asarray([[VOCAB.pad_id] + list(prefix)])
        with ag.no_grad():
            logits = decoder_forward(decoder_ids, encoded, config, params)
        return logits.data[0, -1]

    return step


def _strip_eos(tokens: list[int]) -> list[int]:
    return [t for t in tokens if t != VOCAB.eos_id]


def generate_family(
    config: ModelConfig,
    params: ParameterStore,
    prompts,
    cfg: GenerationConfig,
    epoch_tag: int = 1,
) -> list[SequenceRecord]:
    """Continuation sampling: the encoder reads each prompt, the decoder
    extends it; one record per (prompt, beam rank).

    Expects parameters fine-tuned beforehand (training.fit with the encoder
    freeze list); generation itself never mutates them.
    """
    records: list[SequenceRecord] = []
    for prompt_index, prompt in enumerate(prompts):
        text = prompt.sequence if isinstance(prompt, SequenceRecord) else str(prompt)
        text = text[: cfg.prompt_length]
        prompt_ids = VOCAB.encode(text)
        step_fn = decoder_step_fn(config, params, prompt_ids + [VOCAB.eos_id])
        budget = cfg.max_length - len(prompt_ids)
        for rank, (tokens, _score) in enumerate(
            beam_search(step_fn, cfg, max_steps=budget), start=1
        ):
            continuation = VOCAB.decode(_strip_eos(tokens))
            records.append(
                SequenceRecord(
                    id=f"gen|t{cfg.temperature:g}|e{epoch_tag}|b{rank}|p{prompt_index}",
                    sequence=text + continuation if continuation else text,
                )
            )
    return records


def _target_layout(pair: MaskedPair) -> list[object]:
    """Per-step decoding constraint for the pair's expected target structure.

    Entries are either a concrete sentinel id (forced) or the residue-id set
    (one masked token to predict).  The final eos is appended by the caller.
    """
    layout: list[object] = []
    for token in pair.target_ids:
        if token == VOCAB.eos_id:
            continue
        if VOCAB.is_sentinel(token):
            layout.append(token)
        else:
            layout.append(RESIDUE_IDS)
    return layout


def mlm_infill(
    config: ModelConfig,
    params: ParameterStore,
    record,
    cfg: GenerationConfig,
) -> list[SequenceRecord]:
    """One-shot infilling: corrupt, decode masked content, splice it back.

    Decoding is constrained to the corrupted pair's target structure (sentinel
    slots are forced, content slots range over residues), so every variant
    keeps all unmasked residues and the input length.  Inference-only: no
    parameter is touched.
    """
    text = record.sequence if isinstance(record, SequenceRecord) else str(record)
    record_id = record.id if isinstance(record, SequenceRecord) else "seq"
    seq = VOCAB.encode(text)
    spec = CorruptionSpec(Strategy.S4, cfg.mask_probability, cfg.seed)
    rng = np.random.default_rng(spec.seed)
    indices = select_indices(seq, spec, rng)
    pair = build_pair(seq, indices, spec.strategy)

    layout = _target_layout(pair)

    def allowed(step: int):
        if step < len(layout):
            slot = layout[step]
            return slot if isinstance(slot, frozenset) else {slot}
        return {VOCAB.eos_id}

    step_fn = decoder_step_fn(config, params, pair.input_ids)
    beams = beam_search(step_fn, cfg, max_steps=len(layout) + 1, allowed_fn=allowed)

    masked = set(pair.mask_positions)
    variants: list[SequenceRecord] = []
    for rank, (tokens, _score) in enumerate(beams, start=1):
        decoded = _strip_eos(tokens)
        filled = [t for t in decoded if not VOCAB.is_sentinel(t)]
        if len(decoded) != len(layout) or len(filled) != len(pair.mask_positions):
            raise SpliceMismatchError(
                f"decoded target has {len(filled)} residues for "
                f"{len(pair.mask_positions)} masked positions"
            )
        fill_iter = iter(filled)
        rebuilt = [next(fill_iter) if i in masked else tok for i, tok in enumerate(seq)]
        variants.append(
            SequenceRecord(
                id=f"{record_id}|infill|p{cfg.mask_probability:g}|t{cfg.temperature:g}|b{rank}",
                sequence=VOCAB.decode(rebuilt),
            )
        )
    return variants


def uniqueness_report(generated, reference) -> dict:
    """Fraction of generated sequences unseen in the reference set and in
    earlier generated entries, plus the duplicated sequences."""
    seen = {r.sequence if isinstance(r, SequenceRecord) else str(r) for r in reference}
    unique = 0
    duplicates: list[str] = []
    total = 0
    for item in generated:
        text = item.sequence if isinstance(item, SequenceRecord) else str(item)
        total += 1
        if text in seen:
            duplicates.append(text)
        else:
            unique += 1
        seen.add(text)
    return {
        "unique_fraction": unique / total if total else 1.0,
        "duplicates": duplicates,
    }
