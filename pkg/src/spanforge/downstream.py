"""Supervised probes over frozen embeddings, plus nearest-neighbor
annotation transfer.

The probe is one mixed block — multi-head self-attention in parallel with a
depthwise convolution, concatenated and projected — followed by a gated
feed-forward at half the embedding width and a task head.  Embeddings are
plain inputs: training a probe can never touch upstream model weights.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autograd as ag
from . import metrics
from .training import AdamW, lr_schedule


class DownstreamError(Exception):
    """Base class for probe/transfer errors."""


class ShapeMismatchError(DownstreamError):
    """Embedding shape does not fit the probe configuration."""


class EmptySplitError(DownstreamError):
    """Training or evaluation split is empty."""


class EmptyIndexError(DownstreamError):
    """Annotation transfer requires at least one indexed entry."""


class LengthMismatchError(DownstreamError):
    """Prediction and truth lists disagree in length or tuple arity."""


class HeadType(str, Enum):
    REGRESSION = "regression"
    BINARY = "binary"
    MULTICLASS = "multiclass"
    PER_RESIDUE_MULTICLASS = "per_residue_multiclass"
    RESIDUE_PAIR_BINARY = "residue_pair_binary"


#: heads that score whole proteins and therefore pool over positions
POOLED_HEADS = frozenset(
    {HeadType.REGRESSION, HeadType.BINARY, HeadType.MULTICLASS}
)


@dataclass(frozen=True)
class ProbeConfig:
    input_dim: int
    head_type: HeadType
    num_classes: int = 2
    conv_kernel: int = 7
    n_heads: int = 4
    dropout: float = 0.2
    ffn_dim: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "head_type", HeadType(self.head_type))
        if self.input_dim < 1 or self.input_dim % 2 != 0:
            raise ValueError("input_dim must be positive and even (ffn is half of it)")
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", self.input_dim // 2)
        if self.ffn_dim * 2 != self.input_dim:
            raise ValueError(
                f"ffn_dim must be exactly input_dim/2, got {self.ffn_dim} for {self.input_dim}"
            )
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")
        if self.input_dim % self.n_heads != 0:
            raise ValueError("n_heads must divide input_dim")
        if self.head_type in (HeadType.MULTICLASS, HeadType.PER_RESIDUE_MULTICLASS):
            if self.num_classes < 2:
                raise ValueError("multiclass heads need num_classes >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def output_dim(self) -> int:
        if self.head_type in (HeadType.MULTICLASS, HeadType.PER_RESIDUE_MULTICLASS):
            return self.num_classes
        return 1


def probe_parameter_shapes(cfg: ProbeConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.input_dim
    shapes = {
        "attn.q": (d, d),
        "attn.k": (d, d),
        "attn.v": (d, d),
        "attn.o": (d, d),
        "conv.depthwise": (cfg.conv_kernel, d),
        "mix.project": (2 * d, d),
        "ffn.wg": (d, cfg.ffn_dim),
        "ffn.wl": (d, cfg.ffn_dim),
        "ffn.wo": (cfg.ffn_dim, d),
    }
    if cfg.head_type is HeadType.RESIDUE_PAIR_BINARY:
        # the two halves of a shared head over concatenated (i, j) features
        shapes["head.wi"] = (d, 1)
        shapes["head.wj"] = (d, 1)
        shapes["head.bias"] = (1,)
    else:
        shapes["head.w"] = (d, cfg.output_dim)
        shapes["head.bias"] = (cfg.output_dim,)
    return shapes


def init_probe_params(cfg: ProbeConfig, seed: int = 7) -> dict[str, ag.Tensor]:
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(cfg.input_dim)
    params = {}
    for name, shape in probe_parameter_shapes(cfg).items():
        if name == "head.bias":
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = (rng.standard_normal(shape) * std).astype(np.float32)
        params[name] = ag.Tensor(data, requires_grad=True)
    return params


def _mixed_block(
    x: ag.Tensor,
    cfg: ProbeConfig,
    params: dict[str, ag.Tensor],
    train: bool,
    rng: np.random.Generator | None,
) -> ag.Tensor:
    length, d = x.shape
    dh = d // cfg.n_heads

    def split_heads(t):
        return t.reshape(length, cfg.n_heads, dh).transpose(1, 0, 2)

    q = split_heads(x @ params["attn.q"])
    k = split_heads(x @ params["attn.k"])
    v = split_heads(x @ params["attn.v"])
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    weights = ag.softmax(scores, axis=-1)
    attended = (weights @ v).transpose(1, 0, 2).reshape(length, d)
    attn_out = attended @ params["attn.o"]

    conv_out = ag.depthwise_conv1d(
        x.reshape(1, length, d), params["conv.depthwise"]
    ).reshape(length, d)

    mixed = ag.concat([attn_out, conv_out], axis=-1) @ params["mix.project"]
    if train and cfg.dropout > 0:
        mixed = ag.dropout(mixed, cfg.dropout, rng)
    gated = ag.gelu(mixed @ params["ffn.wg"]) * (mixed @ params["ffn.wl"])
    if train and cfg.dropout > 0:
        gated = ag.dropout(gated, cfg.dropout, rng)
    return gated @ params["ffn.wo"]


def probe_logits(
    embeddings,
    cfg: ProbeConfig,
    params: dict[str, ag.Tensor],
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> ag.Tensor:
    """Pre-activation head outputs for one record's (L, input_dim) embeddings."""
    data = np.asarray(embeddings, dtype=np.float32)
    if data.ndim != 2 or data.shape[1] != cfg.input_dim:
        raise ShapeMismatchError(
            f"expected (L, {cfg.input_dim}) embeddings, got {data.shape}"
        )
    if train and cfg.dropout > 0 and dropout_rng is None:
        raise ValueError("training with dropout requires a dropout_rng")
    x = ag.Tensor(data)
    hidden = _mixed_block(x, cfg, params, train, dropout_rng)

    if cfg.head_type is HeadType.RESIDUE_PAIR_BINARY:
        length = data.shape[0]
        # concat(i, j) through a shared head == h_i @ wi + h_j @ wj
        by_i = hidden @ params["head.wi"]  # (L, 1)
        by_j = (hidden @ params["head.wj"]).reshape(1, length)
        logits = by_i + by_j + params["head.bias"]
        return (logits + logits.transpose()) * 0.5

    if cfg.head_type in POOLED_HEADS:
        hidden = hidden.max(axis=0, keepdims=True)  # (1, d)
    return hidden @ params["head.w"] + params["head.bias"]


def probe_forward(
    embeddings,
    cfg: ProbeConfig,
    params: dict[str, ag.Tensor],
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Task-space predictions: identity for regression, sigmoid for binary
    heads, softmax rows for multiclass heads.

    Shapes: (1,) regression/binary, (k,) multiclass, (L, k) per-residue,
    (L, L) residue-pair.
    """
    logits = probe_logits(embeddings, cfg, params, train, dropout_rng)
    head = cfg.head_type
    if head is HeadType.REGRESSION:
        return logits.data.reshape(1).copy()
    if head is HeadType.BINARY:
        return ag.sigmoid(logits).data.reshape(1).copy()
    if head is HeadType.MULTICLASS:
        return ag.softmax(logits, axis=-1).data.reshape(cfg.num_classes).copy()
    if head is HeadType.PER_RESIDUE_MULTICLASS:
        return ag.softmax(logits, axis=-1).data.copy()
    return ag.sigmoid(logits).data.copy()


# -- training --------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeTrainConfig:
    peak_lr: float = 0.001
    epochs: int = 5
    batch_size: int = 1
    warmup_steps: int = 1000
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 7

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ProbeResult:
    params: dict[str, ag.Tensor]
    metric: float
    losses: list[float] = field(default_factory=list)


def _as_two_class(logits_flat: ag.Tensor) -> ag.Tensor:
    """Lift raw binary logits (N, 1) to two-class logits (N, 2) so the fused
    cross-entropy doubles as binary cross-entropy: softmax([0, z])[1] == sigmoid(z)."""
    zeros = ag.Tensor(np.zeros_like(logits_flat.data))
    return ag.concat([zeros, logits_flat], axis=-1)


def _example_loss(logits: ag.Tensor, label, head: HeadType) -> ag.Tensor:
    if head is HeadType.REGRESSION:
        diff = logits.reshape(1) - ag.Tensor(np.array([label], dtype=np.float32))
        return (diff * diff).mean()
    if head is HeadType.BINARY:
        return ag.cross_entropy(_as_two_class(logits), np.array([int(label)]))
    if head is HeadType.MULTICLASS:
        return ag.cross_entropy(logits, np.array([int(label)]))
    if head is HeadType.PER_RESIDUE_MULTICLASS:
        return ag.cross_entropy(logits, np.asarray(label, dtype=np.int64))
    flat = logits.reshape(logits.size, 1)
    targets = np.asarray(label, dtype=bool).astype(np.int64).reshape(-1)
    return ag.cross_entropy(_as_two_class(flat), targets)


def _heldout_metric(eval_set, cfg: ProbeConfig, params) -> float:
    head = cfg.head_type
    if head is HeadType.REGRESSION:
        preds = [float(probe_forward(e, cfg, params)[0]) for e, _ in eval_set]
        truths = [float(y) for _, y in eval_set]
        return metrics.spearman(preds, truths)
    if head is HeadType.BINARY:
        hits = sum(
            (probe_forward(e, cfg, params)[0] > 0.5) == bool(y) for e, y in eval_set
        )
        return hits / len(eval_set)
    if head is HeadType.MULTICLASS:
        hits = sum(
            int(np.argmax(probe_forward(e, cfg, params))) == int(y)
            for e, y in eval_set
        )
        return hits / len(eval_set)
    if head is HeadType.PER_RESIDUE_MULTICLASS:
        correct = total = 0
        for emb, labels in eval_set:
            picks = np.argmax(probe_forward(emb, cfg, params), axis=-1)
            correct += int((picks == np.asarray(labels)).sum())
            total += len(labels)
        return correct / total
    scores = [
        metrics.contact_precision(probe_forward(e, cfg, params), np.asarray(t, bool))
        for e, t in eval_set
    ]
    return float(np.mean(scores))


def train_probe(
    train_set,
    eval_set,
    cfg: ProbeConfig,
    train_cfg: ProbeTrainConfig = ProbeTrainConfig(),
) -> ProbeResult:
    """Fit the probe on (embedding, label) pairs and score the held-out split.

    The metric is head-specific: Spearman rho for regression, accuracy for
    classification heads, contact precision for the pair head.
    """
    train_set = list(train_set)
    eval_set = list(eval_set)
    if not train_set:
        raise EmptySplitError("training split is empty")
    if not eval_set:
        raise EmptySplitError("evaluation split is empty")

    params = init_probe_params(cfg, seed=train_cfg.seed)
    optimizer = AdamW(
        params.items(),
        betas=train_cfg.betas,
        eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
    )
    dropout_rng = np.random.default_rng(train_cfg.seed) if cfg.dropout > 0 else None
    batch = train_cfg.batch_size
    batches_per_epoch = math.ceil(len(train_set) / batch)
    total_steps = train_cfg.epochs * batches_per_epoch
    losses: list[float] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = np.random.default_rng(train_cfg.seed + epoch).permutation(len(train_set))
        for start in range(0, len(order), batch):
            members = order[start : start + batch]
            step += 1
            batch_losses = []
            for index in members:
                embeddings, label = train_set[index]
                logits = probe_logits(
                    embeddings, cfg, params, train=True, dropout_rng=dropout_rng
                )
                batch_losses.append(_example_loss(logits, label, cfg.head_type))
            total = batch_losses[0]
            for extra in batch_losses[1:]:
                total = total + extra
            loss = total * (1.0 / len(members))
            loss.backward()
            lr = lr_schedule(step, train_cfg.warmup_steps, total_steps, train_cfg.peak_lr)
            optimizer.step(lr=lr)
            for tensor in params.values():
                tensor.grad = None
            losses.append(loss.item())

    return ProbeResult(params=params, metric=_heldout_metric(eval_set, cfg, params), losses=losses)


# -- annotation transfer ------------------------------------------------------------


@dataclass(frozen=True)
class EATIndex:
    """Lookup table for embedding-based annotation transfer: one embedding row
    per entry, each carrying a 4-level label tuple."""

    embeddings: np.ndarray
    labels: tuple[tuple, ...]

    def __post_init__(self) -> None:
        data = np.asarray(self.embeddings, dtype=np.float64)
        object.__setattr__(self, "embeddings", data)
        object.__setattr__(self, "labels", tuple(tuple(t) for t in self.labels))
        if data.ndim != 2 or data.shape[0] < 1:
            raise EmptyIndexError("index needs at least one embedding row")
        if len(self.labels) != data.shape[0]:
            raise LengthMismatchError(
                f"{data.shape[0]} embeddings vs {len(self.labels)} label tuples"
            )
        for t in self.labels:
            if len(t) != 4:
                raise LengthMismatchError(f"label tuple must have 4 levels, got {t!r}")


def knn_transfer(queries, index: EATIndex, k: int = 1) -> list[tuple]:
    """Transfer 4-level labels from Euclidean nearest neighbors.

    k=1 copies the single best match (distance ties break toward the lowest
    index); k>1 takes the per-level plurality, ties breaking toward the
    label seen earliest in nearest-first order.
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2:
        raise ShapeMismatchError("queries must be a (n, d) matrix")
    if q.shape[1] != index.embeddings.shape[1]:
        raise ShapeMismatchError(
            f"query dim {q.shape[1]} != index dim {index.embeddings.shape[1]}"
        )
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, index.embeddings.shape[0])
    out: list[tuple] = []
    for row in q:
        sq_dist = ((index.embeddings - row) ** 2).sum(axis=1)
        if k == 1:
            out.append(index.labels[int(np.argmin(sq_dist))])
            continue
        nearest = np.argsort(sq_dist, kind="stable")[:k]
        votes = [index.labels[int(i)] for i in nearest]
        picked = []
        for level in range(4):
            level_votes = [v[level] for v in votes]
            counts = Counter(level_votes)
            best = max(counts.items(), key=lambda kv: (kv[1], -level_votes.index(kv[0])))
            picked.append(best[0])
        out.append(tuple(picked))
    return out


@dataclass(frozen=True)
class EATReport:
    per_level: tuple[float, float, float, float]
    mean: float


def eat_accuracy(predicted, truth) -> EATReport:
    """Accuracy at each of the four annotation levels plus their arithmetic mean."""
    predicted = list(predicted)
    truth = list(truth)
    if len(predicted) != len(truth) or not predicted:
        raise LengthMismatchError(
            f"need equal nonempty lists, got {len(predicted)} vs {len(truth)}"
        )
    for t in (*predicted, *truth):
        if len(t) != 4:
            raise LengthMismatchError(f"label tuple must have 4 levels, got {t!r}")
    per_level = tuple(
        sum(p[level] == t[level] for p, t in zip(predicted, truth)) / len(predicted)
        for level in range(4)
    )
    return EATReport(per_level=per_level, mean=sum(per_level) / 4.0)
