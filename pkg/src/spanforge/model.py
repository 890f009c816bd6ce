"""Encoder-decoder transformer with a shared relative-position bias table.

Functional style throughout: a :class:`ParameterStore` holds named tensors and
the forward passes are plain functions over it, so the same parameters can be
shared by concurrent readers and swapped wholesale by the training loop.

Design points worth noting:
- pre-norm residual blocks with RMS-style scale normalization plus a final
  norm on each stack;
- one relative-bias table (buckets x heads) shared by every encoder layer and
  every decoder self-attention layer; cross-attention carries no position
  bias;
- the feed-forward block is either gated (out = W_o(GELU(W_g x) * (W_l x)),
  three matrices) or plain ReLU (two matrices);
- attention logits are scaled by 1/sqrt(d_head);
- the decoder starts from the pad token when targets are shifted right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from spanforge import autograd as ag
from spanforge.autograd import Tensor
from spanforge.corpus import VOCAB, SequenceRecord

NEG_INF = -1e9


class ModelError(Exception):
    pass


class LengthExceededError(ModelError):
    pass


class ShapeMismatchError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 1
    d_ff: int = 256
    activation: str = "gated_gelu"
    relpos_num_embeddings: int = 32
    relpos_offset: int = 128
    tie_decoder_embedding: bool = False
    vocab_size: int = VOCAB.size
    max_length: int = 512
    dropout: float = 0.1
    seed: int = 42

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_heads < 1 or self.d_ff < 1 or self.d_model < 1:
            raise ValueError("head and width counts must be >= 1")
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if self.relpos_num_embeddings < 2:
            raise ValueError("relpos_num_embeddings must be >= 2")
        if self.activation not in ("gated_gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale preset used by the fast tests: 2 encoder / 1 decoder layers."""
    base = dict(
        d_model=64,
        n_heads=4,
        n_encoder_layers=2,
        n_decoder_layers=1,
        d_ff=256,
        dropout=0.0,
        max_length=512,
    )
    base.update(overrides)
    return ModelConfig(**base)


def reference_baseline_config() -> ModelConfig:
    """Full-scale reference: 768 wide, 12 heads, 36+36 layers (constructible only)."""
    return ModelConfig(
        d_model=768,
        n_heads=12,
        n_encoder_layers=36,
        n_decoder_layers=36,
        d_ff=3072,
        relpos_num_embeddings=32,
        relpos_offset=128,
    )


def reference_base_config() -> ModelConfig:
    """Full-scale reference: 768 wide, 12 heads, 48+24 layers (constructible only)."""
    return ModelConfig(
        d_model=768,
        n_heads=12,
        n_encoder_layers=48,
        n_decoder_layers=24,
        d_ff=3072,
        relpos_num_embeddings=64,
        relpos_offset=128,
    )


def reference_large_config() -> ModelConfig:
    """Full-scale reference: 1536 wide, 16 heads, 48+24 layers (constructible only)."""
    return ModelConfig(
        d_model=1536,
        n_heads=16,
        n_encoder_layers=48,
        n_decoder_layers=24,
        d_ff=3840,
        relpos_num_embeddings=64,
        relpos_offset=128,
    )


# -- parameters ---------------------------------------------------------------


def _ffn_names(prefix: str, activation: str) -> list[str]:
    if activation == "gated_gelu":
        return [f"{prefix}.ffn.wg", f"{prefix}.ffn.wl", f"{prefix}.ffn.wo"]
    return [f"{prefix}.ffn.wi", f"{prefix}.ffn.wo"]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named tensor and its shape, as a pure function of the config."""
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embedding": (config.vocab_size, d),
        "relpos_bias": (config.relpos_num_embeddings, config.n_heads),
    }

    def attn(prefix: str) -> None:
        for proj in ("q", "k", "v", "o"):
            shapes[f"{prefix}.{proj}"] = (d, d)

    def ffn(prefix: str) -> None:
        for name in _ffn_names(prefix, config.activation):
            shapes[name] = (ff, d) if name.endswith(".wo") else (d, ff)

    for i in range(config.n_encoder_layers):
        prefix = f"encoder.{i}"
        shapes[f"{prefix}.attn_norm"] = (d,)
        attn(f"{prefix}.attn")
        shapes[f"{prefix}.ffn_norm"] = (d,)
        ffn(prefix)
    shapes["encoder_norm"] = (d,)

    for i in range(config.n_decoder_layers):
        prefix = f"decoder.{i}"
        shapes[f"{prefix}.attn_norm"] = (d,)
        attn(f"{prefix}.attn")
        shapes[f"{prefix}.cross_norm"] = (d,)
        attn(f"{prefix}.cross")
        shapes[f"{prefix}.ffn_norm"] = (d,)
        ffn(prefix)
    if config.n_decoder_layers > 0:
        shapes["decoder_norm"] = (d,)
        if not config.tie_decoder_embedding:
            shapes["lm_head"] = (d, config.vocab_size)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape in parameter_shapes(config).values())


class ParameterStore:
    """Named parameter tensors for one model instance."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(tensors) != set(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ShapeMismatchError(f"parameter names mismatch: missing={missing}, extra={extra}")
        for name, tensor in tensors.items():
            if tensor.shape != expected[name]:
                raise ShapeMismatchError(
                    f"{name}: expected shape {expected[name]}, got {tensor.shape}"
                )
        self.config = config
        self._tensors = dict(tensors)

    @classmethod
    def initialize(cls, config: ModelConfig, dtype=np.float32) -> "ParameterStore":
        """Scaled-normal init (variance 1/d_model), deterministic in config.seed."""
        rng = np.random.default_rng(config.seed)
        std = 1.0 / math.sqrt(config.d_model)
        tensors = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith("_norm") or name.endswith("norm"):
                data = np.ones(shape, dtype=dtype)
            else:
                data = (rng.standard_normal(shape) * std).astype(dtype)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        return sorted(self._tensors.items())

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(
            self.config,
            {
                name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                for name, t in self._tensors.items()
            },
        )

    def output_projection(self) -> Tensor:
        """The decoder output projection; the embedding itself when tied."""
        if self.config.tie_decoder_embedding:
            return self._tensors["embedding"]
        return self._tensors["lm_head"]


@dataclass
class HiddenStates:
    states: Tensor
    padding_mask: np.ndarray  # True where the position holds a real token

    @property
    def shape(self) -> tuple[int, ...]:
        return self.states.shape


# -- relative position buckets --------------------------------------------------


def bucket_table(deltas: np.ndarray, num_buckets: int, max_distance: int, bidirectional: bool) -> np.ndarray:
    """Vectorized piecewise-log bucket assignment for signed offsets."""
    deltas = np.asarray(deltas, dtype=np.int64)
    buckets = np.zeros_like(deltas)
    if bidirectional:
        num_buckets //= 2
        buckets += (deltas > 0).astype(np.int64) * num_buckets
        magnitude = np.abs(deltas)
    else:
        magnitude = -np.minimum(deltas, 0)
    max_exact = num_buckets // 2
    is_small = magnitude < max_exact
    safe = np.maximum(magnitude, 1)
    scaled = (
        max_exact
        + (
            np.log(safe.astype(np.float64) / max_exact)
            / math.log(max_distance / max_exact)
            * (num_buckets - max_exact)
        ).astype(np.int64)
    )
    large = np.minimum(scaled, num_buckets - 1)
    return buckets + np.where(is_small, magnitude, large)


def relative_bucket(delta: int, num_buckets: int, max_distance: int, bidirectional: bool = True) -> int:
    """Bucket id for a single signed key-minus-query offset."""
    if num_buckets < 2:
        raise ValueError("num_buckets must be >= 2")
    return int(bucket_table(np.asarray([delta]), num_buckets, max_distance, bidirectional)[0])


def position_bias(
    len_q: int,
    len_k: int,
    config: ModelConfig,
    params: ParameterStore,
    bidirectional: bool = True,
) -> Tensor:
    """(n_heads, len_q, len_k) additive attention bias from the shared table."""
    deltas = np.arange(len_k)[None, :] - np.arange(len_q)[:, None]
    buckets = bucket_table(
        deltas, config.relpos_num_embeddings, config.relpos_offset, bidirectional
    )
    gathered = ag.embedding(params["relpos_bias"], buckets)  # (len_q, len_k, heads)
    return gathered.transpose(2, 0, 1)


# -- forward passes ---------------------------------------------------------------


def _check_length(length: int, config: ModelConfig) -> None:
    if length > config.max_length:
        raise LengthExceededError(f"sequence length {length} exceeds max_length {config.max_length}")


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: ParameterStore,
    prefix: str,
    config: ModelConfig,
    additive_mask: np.ndarray,
    bias: Tensor | None,
    sink: list | None = None,
):
    q = _split_heads(x_q @ params[f"{prefix}.q"], config.n_heads)
    k = _split_heads(x_kv @ params[f"{prefix}.k"], config.n_heads)
    v = _split_heads(x_kv @ params[f"{prefix}.v"], config.n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * Tensor(
        np.asarray(1.0 / math.sqrt(config.d_head), dtype=x_q.dtype)
    )
    if bias is not None:
        scores = scores + bias
    scores = scores + Tensor(additive_mask.astype(x_q.dtype))
    weights = ag.softmax(scores, axis=-1)
    if sink is not None:
        sink.append(weights.data.copy())
    return _merge_heads(weights @ v) @ params[f"{prefix}.o"]


def _ffn(x: Tensor, params: ParameterStore, prefix: str, config: ModelConfig) -> Tensor:
    if config.activation == "gated_gelu":
        gate = ag.gelu(x @ params[f"{prefix}.ffn.wg"])
        linear = x @ params[f"{prefix}.ffn.wl"]
        return (gate * linear) @ params[f"{prefix}.ffn.wo"]
    return ag.relu(x @ params[f"{prefix}.ffn.wi"]) @ params[f"{prefix}.ffn.wo"]


def _maybe_dropout(x: Tensor, config: ModelConfig, rng: np.random.Generator | None) -> Tensor:
    if rng is None or config.dropout <= 0.0:
        return x
    return ag.dropout(x, config.dropout, rng)


def encoder_forward(
    input_ids: np.ndarray,
    padding_mask: np.ndarray | None,
    config: ModelConfig,
    params: ParameterStore,
    dropout_rng: np.random.Generator | None = None,
    zero_attention: bool = False,
    attention_sink: list | None = None,
) -> HiddenStates:
    """Bidirectional encoder stack; returns last hidden states.

    ``zero_attention`` is a diagnostic mode that skips the attention mixing
    entirely, leaving each position a function of its own token only.
    ``attention_sink``, when a list, collects per-layer softmax weights.
    """
    input_ids = np.asarray(input_ids)
    if input_ids.ndim == 1:
        input_ids = input_ids[None, :]
    if padding_mask is None:
        padding_mask = input_ids != VOCAB.pad_id
    padding_mask = np.asarray(padding_mask, dtype=bool)
    _check_length(input_ids.shape[1], config)
    if np.any(input_ids >= config.vocab_size) or np.any(input_ids < 0):
        raise ModelError("token id outside vocabulary")

    x = _maybe_dropout(ag.embedding(params["embedding"], input_ids), config, dropout_rng)
    length = input_ids.shape[1]
    key_mask = np.where(padding_mask, 0.0, NEG_INF)[:, None, None, :]
    bias = position_bias(length, length, config, params, bidirectional=True)
    for i in range(config.n_encoder_layers):
        prefix = f"encoder.{i}"
        if not zero_attention:
            normed = ag.rms_norm(x, params[f"{prefix}.attn_norm"])
            attended = _attention(
                normed,
                normed,
                params,
                f"{prefix}.attn",
                config,
                key_mask,
                bias,
                sink=attention_sink,
            )
            x = x + _maybe_dropout(attended, config, dropout_rng)
        fed = _ffn(ag.rms_norm(x, params[f"{prefix}.ffn_norm"]), params, prefix, config)
        x = x + _maybe_dropout(fed, config, dropout_rng)
    x = ag.rms_norm(x, params["encoder_norm"])
    x = x * Tensor(padding_mask[:, :, None].astype(x.dtype))
    return HiddenStates(states=x, padding_mask=padding_mask)


def decoder_forward(
    decoder_input_ids: np.ndarray,
    encoder_states: HiddenStates,
    config: ModelConfig,
    params: ParameterStore,
    decoder_padding_mask: np.ndarray | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Causal decoder over encoder context; returns (batch, T, vocab) logits."""
    if config.n_decoder_layers < 1:
        raise ModelError("model has no decoder layers")
    ids = np.asarray(decoder_input_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    _check_length(ids.shape[1], config)
    t = ids.shape[1]
    if decoder_padding_mask is None:
        decoder_padding_mask = np.ones(ids.shape, dtype=bool)

    x = _maybe_dropout(ag.embedding(params["embedding"], ids), config, dropout_rng)
    causal = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, NEG_INF)[None, None, :, :]
    self_key_mask = np.where(decoder_padding_mask, 0.0, NEG_INF)[:, None, None, :]
    cross_mask = np.where(encoder_states.padding_mask, 0.0, NEG_INF)[:, None, None, :]
    bias = position_bias(t, t, config, params, bidirectional=False)
    for i in range(config.n_decoder_layers):
        prefix = f"decoder.{i}"
        normed = ag.rms_norm(x, params[f"{prefix}.attn_norm"])
        attended = _attention(
            normed,
            normed,
            params,
            f"{prefix}.attn",
            config,
            causal + self_key_mask,
            bias,
        )
        x = x + _maybe_dropout(attended, config, dropout_rng)
        crossed = _attention(
            ag.rms_norm(x, params[f"{prefix}.cross_norm"]),
            encoder_states.states,
            params,
            f"{prefix}.cross",
            config,
            cross_mask,
            bias=None,
        )
        x = x + _maybe_dropout(crossed, config, dropout_rng)
        fed = _ffn(ag.rms_norm(x, params[f"{prefix}.ffn_norm"]), params, prefix, config)
        x = x + _maybe_dropout(fed, config, dropout_rng)
    x = ag.rms_norm(x, params["decoder_norm"])
    projection = params.output_projection()
    if config.tie_decoder_embedding:
        return x @ projection.transpose(1, 0)
    return x @ projection


def seq2seq_logits(
    input_ids: np.ndarray,
    decoder_input_ids: np.ndarray,
    config: ModelConfig,
    params: ParameterStore,
    encoder_padding_mask: np.ndarray | None = None,
    decoder_padding_mask: np.ndarray | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Full encoder-decoder forward; padding inferred from pad ids if omitted."""
    encoded = encoder_forward(
        input_ids, encoder_padding_mask, config, params, dropout_rng=dropout_rng
    )
    return decoder_forward(
        decoder_input_ids,
        encoded,
        config,
        params,
        decoder_padding_mask=decoder_padding_mask,
        dropout_rng=dropout_rng,
    )


def shift_right(target_ids: np.ndarray, start_id: int = VOCAB.pad_id) -> np.ndarray:
    """Decoder inputs: the target shifted right behind a start token."""
    target_ids = np.asarray(target_ids)
    if target_ids.ndim == 1:
        return np.concatenate([[start_id], target_ids[:-1]])
    return np.concatenate(
        [np.full((target_ids.shape[0], 1), start_id, dtype=target_ids.dtype), target_ids[:, :-1]],
        axis=1,
    )


# -- extraction -------------------------------------------------------------------


def _record_ids(record) -> list[int]:
    if isinstance(record, SequenceRecord):
        return VOCAB.encode(record.sequence)
    if isinstance(record, str):
        return VOCAB.encode(record)
    return list(record)


def extract_embeddings(
    records,
    config: ModelConfig,
    params: ParameterStore,
    pooling: str = "none",
    batch_size: int = 16,
) -> list[np.ndarray]:
    """Last encoder hidden states per record; optionally pooled over residues.

    pooling: "none" -> (L, d_model) per record; "mean"/"max" -> (d_model,)
    computed over non-pad positions only.
    """
    if pooling not in ("none", "mean", "max"):
        raise ValueError(f"unknown pooling {pooling!r}")
    encoded = [_record_ids(r) for r in records]
    outputs: list[np.ndarray] = [None] * len(encoded)
    order = sorted(range(len(encoded)), key=lambda i: len(encoded[i]))
    with ag.no_grad():
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            max_len = max(len(encoded[i]) for i in chunk)
            ids = np.full((len(chunk), max_len), VOCAB.pad_id, dtype=np.int64)
            for row, i in enumerate(chunk):
                ids[row, : len(encoded[i])] = encoded[i]
            hidden = encoder_forward(ids, None, config, params)
            states = hidden.states.data
            for row, i in enumerate(chunk):
                n = len(encoded[i])
                per_residue = states[row, :n]
                if pooling == "none":
                    outputs[i] = per_residue.copy()
                elif pooling == "mean":
                    outputs[i] = per_residue.mean(axis=0)
                else:
                    outputs[i] = per_residue.max(axis=0)
    return outputs


def extract_attention_maps(record, config: ModelConfig, params: ParameterStore) -> np.ndarray:
    """(n_layers, n_heads, L, L) softmax attention weights for one record."""
    ids = np.asarray(_record_ids(record))[None, :]
    sink: list = []
    with ag.no_grad():
        encoder_forward(ids, None, config, params, attention_sink=sink)
    return np.stack([layer[0] for layer in sink], axis=0)
