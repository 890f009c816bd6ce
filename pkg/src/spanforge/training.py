"""Denoising-objective training: loss, AdamW, linear schedule, train loop.

The loop corrupts each batch on the fly (fresh deterministic masks per epoch),
runs the encoder-decoder, and applies AdamW with linear warmup/decay.  A
freeze list of parameter-name prefixes supports the frozen-encoder
fine-tuning mode used for family generation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from spanforge import autograd as ag
from spanforge.autograd import Tensor
from spanforge.checkpoint import save_checkpoint
from spanforge.corpus import VOCAB, SequenceRecord
from spanforge.corruption import CorruptionSpec, MaskedPair, corrupt
from spanforge.model import ModelConfig, ParameterStore, seq2seq_logits, shift_right


class TrainingError(Exception):
    pass


class NoActivePositionsError(TrainingError):
    pass


#: parameter-name prefixes that freeze everything upstream of the decoder
FREEZE_ENCODER = ("embedding", "relpos_bias", "encoder")


def cross_entropy(logits: Tensor, target_ids: np.ndarray, loss_mask: np.ndarray | None = None) -> Tensor:
    """Mean NLL over loss-active, non-pad target positions.

    logits: (..., vocab); target_ids/loss_mask: matching leading shape.
    """
    target_ids = np.asarray(target_ids)
    vocab = logits.shape[-1]
    flat_logits = logits.reshape(-1, vocab)
    flat_targets = target_ids.reshape(-1)
    if loss_mask is None:
        mask = np.ones(flat_targets.shape, dtype=bool)
    else:
        mask = np.asarray(loss_mask, dtype=bool).reshape(-1)
    mask = mask & (flat_targets != VOCAB.pad_id)
    if not mask.any():
        raise NoActivePositionsError("no loss-active positions in batch")
    return ag.cross_entropy(flat_logits, flat_targets, mask)


def lr_schedule(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear ramp 0 -> peak over warmup, then linear decay to 0 at total_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    remaining = (total_steps - step) / (total_steps - warmup_steps)
    return peak_lr * max(0.0, remaining)


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(
        self,
        named_params,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        freeze: tuple[str, ...] = (),
    ):
        self.params = [
            (name, tensor)
            for name, tensor in named_params
            if not any(name == p or name.startswith(p) for p in freeze)
        ]
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in self.params}
        self._v = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, tensor in self.params:
            grad = tensor.grad
            if grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * tensor.data
            tensor.data -= (lr * update).astype(tensor.data.dtype)

    def zero_grad(self, params: ParameterStore | None = None) -> None:
        if params is None:
            for _, tensor in self.params:
                tensor.grad = None
        else:
            for _, tensor in params.items():
                tensor.grad = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 4
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int | None = None
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 42
    freeze: tuple[str, ...] = ()
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainingLog:
    entries: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, loss)
    epoch_bounds: list[int] = field(default_factory=list)  # step count at each epoch end

    @property
    def losses(self) -> list[float]:
        return [loss for _, _, loss in self.entries]

    def epoch_mean_loss(self, epoch: int) -> float:
        start = 0 if epoch == 0 else self.epoch_bounds[epoch - 1]
        end = self.epoch_bounds[epoch]
        chunk = self.losses[start:end]
        return sum(chunk) / len(chunk)

    def to_tsv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step\tlr\tloss\n")
            for step, lr, loss in self.entries:
                fh.write(f"{step}\t{lr:.8f}\t{loss:.6f}\n")


def example_seed(global_seed: int, epoch: int, example_id: str) -> int:
    """Stable per-example corruption seed (process-salt-free)."""
    digest = hashlib.blake2b(
        f"{global_seed}:{epoch}:{example_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def _tokenize(records) -> list[tuple[str, list[int]]]:
    out = []
    for i, record in enumerate(records):
        if isinstance(record, SequenceRecord):
            out.append((record.id, VOCAB.encode(record.sequence)))
        elif isinstance(record, str):
            out.append((str(i), VOCAB.encode(record)))
        else:
            out.append((str(i), list(record)))
    return out


def _length_grouped_batches(
    examples: list[tuple[str, list[int]]], batch_size: int, rng: np.random.Generator
) -> list[list[int]]:
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i][1]), i))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return batches


def collate_pairs(pairs: list[MaskedPair]):
    """Pad a list of masked pairs into batch arrays for the model."""
    pad = VOCAB.pad_id
    max_in = max(len(p.input_ids) for p in pairs)
    max_t = max(len(p.target_ids) for p in pairs)
    input_ids = np.full((len(pairs), max_in), pad, dtype=np.int64)
    target_ids = np.full((len(pairs), max_t), pad, dtype=np.int64)
    loss_mask = np.zeros((len(pairs), max_t), dtype=bool)
    decoder_mask = np.zeros((len(pairs), max_t), dtype=bool)
    for row, pair in enumerate(pairs):
        input_ids[row, : len(pair.input_ids)] = pair.input_ids
        target_ids[row, : len(pair.target_ids)] = pair.target_ids
        loss_mask[row, : len(pair.target_ids)] = pair.loss_mask
        decoder_mask[row, : len(pair.target_ids)] = True
    return input_ids, target_ids, loss_mask, decoder_mask


def fit(
    config: ModelConfig,
    params: ParameterStore,
    records,
    corruption_spec: CorruptionSpec,
    train_cfg: TrainConfig,
) -> TrainingLog:
    """Corrupt -> forward -> loss -> backward -> step, for every batch and epoch."""
    examples = _tokenize(records)
    if not examples:
        raise TrainingError("empty corpus")
    optimizer = AdamW(
        params.items(),
        betas=train_cfg.betas,
        eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
        freeze=train_cfg.freeze,
    )
    batches_per_epoch = math.ceil(len(examples) / train_cfg.batch_size)
    total_steps = train_cfg.total_steps or train_cfg.epochs * batches_per_epoch
    dropout_rng = (
        np.random.default_rng(train_cfg.seed + 1) if config.dropout > 0 else None
    )

    log = TrainingLog()
    step = 0
    for epoch in range(train_cfg.epochs):
        batch_rng = np.random.default_rng(example_seed(train_cfg.seed, epoch, "batch-order"))
        for batch in _length_grouped_batches(examples, train_cfg.batch_size, batch_rng):
            pairs = []
            for i in batch:
                example_id, seq = examples[i]
                spec = CorruptionSpec(
                    corruption_spec.strategy,
                    corruption_spec.probability,
                    example_seed(train_cfg.seed, epoch, example_id),
                )
                pairs.append(corrupt(seq, spec))
            input_ids, target_ids, loss_mask, decoder_mask = collate_pairs(pairs)
            step += 1
            lr = lr_schedule(step, train_cfg.warmup_steps, total_steps, train_cfg.peak_lr)
            logits = seq2seq_logits(
                input_ids,
                shift_right(target_ids),
                config,
                params,
                decoder_padding_mask=decoder_mask,
                dropout_rng=dropout_rng,
            )
            loss = cross_entropy(logits, target_ids, loss_mask)
            loss.backward()
            optimizer.step(lr)
            optimizer.zero_grad(params)
            log.entries.append((step, lr, float(loss.data)))
        log.epoch_bounds.append(step)

    if train_cfg.log_path:
        log.to_tsv(train_cfg.log_path)
    if train_cfg.checkpoint_path:
        save_checkpoint(train_cfg.checkpoint_path, params, extra_meta={"steps": step})
    return log
