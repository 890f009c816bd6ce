import math

import numpy as np
import pytest

from spanforge import autograd as ag
from spanforge.autograd import Tensor
from spanforge.corpus import VOCAB
from spanforge.model import (
    HiddenStates,
    LengthExceededError,
    ModelConfig,
    ModelError,
    ParameterStore,
    ShapeMismatchError,
    bucket_table,
    decoder_forward,
    encoder_forward,
    extract_attention_maps,
    extract_embeddings,
    parameter_count,
    parameter_shapes,
    position_bias,
    relative_bucket,
    seq2seq_logits,
    shift_right,
    toy_config,
)


def _bucket_reference(delta: int, num_buckets: int, max_distance: int, bidirectional: bool) -> int:
    """Straight-line scalar reimplementation of the piecewise-log bucket map."""
    bucket = 0
    if bidirectional:
        num_buckets //= 2
        if delta > 0:
            bucket += num_buckets
        delta = abs(delta)
    else:
        delta = -min(delta, 0)
    max_exact = num_buckets // 2
    if delta < max_exact:
        return bucket + delta
    large = max_exact + int(
        math.log(delta / max_exact)
        / math.log(max_distance / max_exact)
        * (num_buckets - max_exact)
    )
    return bucket + min(large, num_buckets - 1)


def small_config(**overrides) -> ModelConfig:
    base = dict(
        d_model=16,
        n_heads=2,
        n_encoder_layers=1,
        n_decoder_layers=1,
        d_ff=32,
        dropout=0.0,
        vocab_size=30,
        max_length=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


# -- relative position buckets -------------------------------------------------


def test_bucket_zero_offset():
    assert relative_bucket(0, 32, 128, bidirectional=True) == 0
    assert relative_bucket(0, 32, 128, bidirectional=False) == 0


def test_bucket_saturates_beyond_max_distance():
    far = {relative_bucket(d, 32, 128, True) for d in range(128, 600)}
    assert far == {relative_bucket(200, 32, 128, True)} == {relative_bucket(500, 32, 128, True)}
    near_far = {relative_bucket(-d, 32, 128, True) for d in range(128, 600)}
    assert len(near_far) == 1
    causal_far = {relative_bucket(-d, 32, 128, False) for d in range(128, 600)}
    assert causal_far == {31}


@pytest.mark.parametrize("num_buckets,max_distance", [(32, 128), (64, 128), (32, 64), (16, 64)])
@pytest.mark.parametrize("bidirectional", [True, False])
def test_bucket_matches_straight_line_reference(num_buckets, max_distance, bidirectional):
    deltas = np.arange(-160, 161)
    got = bucket_table(deltas, num_buckets, max_distance, bidirectional)
    want = [_bucket_reference(int(d), num_buckets, max_distance, bidirectional) for d in deltas]
    np.testing.assert_array_equal(got, want)


def test_relative_bucket_validates():
    with pytest.raises(ValueError):
        relative_bucket(0, 1, 128)


def test_position_bias_single_and_toeplitz():
    config = small_config()
    params = ParameterStore.initialize(config)
    one = position_bias(1, 1, config, params)
    table = params["relpos_bias"].data
    np.testing.assert_array_equal(one.data[:, 0, 0], table[relative_bucket(0, 32, 128)])

    bias = position_bias(9, 9, config, params).data
    for h in range(config.n_heads):
        for off in range(-8, 9):
            diag = np.diagonal(bias[h], offset=off)
            assert np.all(diag == diag[0])


def test_position_bias_identical_for_repeated_queries():
    config = small_config()
    params = ParameterStore.initialize(config)
    a = position_bias(5, 7, config, params).data
    b = position_bias(5, 7, config, params).data
    np.testing.assert_array_equal(a, b)


# -- parameter store -------------------------------------------------------------


def test_single_shared_bias_table_regardless_of_depth():
    shallow = parameter_shapes(small_config())
    deep = parameter_shapes(small_config(n_encoder_layers=5, n_decoder_layers=4))
    assert sum("relpos" in n for n in shallow) == 1
    assert sum("relpos" in n for n in deep) == 1


def test_ffn_parameter_ratio_gated_vs_relu():
    gated = small_config(n_encoder_layers=3, n_decoder_layers=2)
    relu = small_config(n_encoder_layers=3, n_decoder_layers=2, activation="relu")
    per_layer = gated.d_model * gated.d_ff
    assert parameter_count(gated) - parameter_count(relu) == 5 * per_layer
    for cfg, n_mats in ((gated, 3), (relu, 2)):
        shapes = parameter_shapes(cfg)
        ffn_weights = sum(
            int(np.prod(s)) for n, s in shapes.items() if ".ffn." in n and n.startswith("encoder.0")
        )
        assert ffn_weights == n_mats * cfg.d_model * cfg.d_ff


def test_tied_embedding_drops_lm_head():
    tied = small_config(tie_decoder_embedding=True)
    untied = small_config()
    assert "lm_head" not in parameter_shapes(tied)
    assert parameter_count(untied) - parameter_count(tied) == tied.d_model * tied.vocab_size
    params = ParameterStore.initialize(tied)
    assert params.output_projection() is params["embedding"]


def test_parameter_store_validates_shapes():
    config = small_config()
    params = ParameterStore.initialize(config)
    tensors = dict(params.items())
    tensors.pop("encoder_norm")
    with pytest.raises(ShapeMismatchError):
        ParameterStore(config, tensors)
    bad = dict(params.items())
    bad["encoder_norm"] = Tensor(np.ones(3))
    with pytest.raises(ShapeMismatchError):
        ParameterStore(config, bad)


def test_initialize_deterministic_in_seed():
    a = ParameterStore.initialize(small_config())
    b = ParameterStore.initialize(small_config())
    c = ParameterStore.initialize(small_config(seed=7))
    for name, tensor in a.items():
        np.testing.assert_array_equal(tensor.data, b[name].data)
    assert not np.array_equal(a["embedding"].data, c["embedding"].data)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(activation="swish")
    with pytest.raises(ValueError):
        ModelConfig(relpos_num_embeddings=1)


# -- forward passes ----------------------------------------------------------------


def test_encoder_output_shape_and_determinism():
    config = toy_config()
    params = ParameterStore.initialize(config)
    ids = np.array([VOCAB.encode("ACDEFGH"), VOCAB.encode("MKTAYIA")])
    out1 = encoder_forward(ids, None, config, params)
    out2 = encoder_forward(ids, None, config, params)
    assert out1.shape == (2, 7, config.d_model)
    np.testing.assert_array_equal(out1.states.data, out2.states.data)


def test_encoder_zero_layers_yields_normalized_embeddings():
    config = small_config(n_encoder_layers=0, n_decoder_layers=0)
    params = ParameterStore.initialize(config)
    ids = np.array([[2, 3, 4]])
    out = encoder_forward(ids, None, config, params)
    x = params["embedding"].data[ids]
    expected = x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + 1e-6)
    np.testing.assert_allclose(out.states.data, expected, rtol=1e-6)


def test_encoder_rejects_overlong_and_bad_ids():
    config = small_config(max_length=4)
    params = ParameterStore.initialize(config)
    with pytest.raises(LengthExceededError):
        encoder_forward(np.zeros((1, 5), dtype=int), None, config, params)
    with pytest.raises(ModelError):
        encoder_forward(np.array([[0, 99]]), None, config, params)


def test_zero_attention_diagnostic_is_positionwise():
    config = small_config(n_encoder_layers=2)
    params = ParameterStore.initialize(config)
    a = np.array([[2, 3, 4, 5]])
    b = np.array([[2, 3, 9, 5]])  # only position 2 differs
    out_a = encoder_forward(a, None, config, params, zero_attention=True).states.data
    out_b = encoder_forward(b, None, config, params, zero_attention=True).states.data
    np.testing.assert_array_equal(out_a[0, [0, 1, 3]], out_b[0, [0, 1, 3]])
    assert not np.array_equal(out_a[0, 2], out_b[0, 2])


def test_padded_positions_are_zero():
    config = small_config()
    params = ParameterStore.initialize(config)
    ids = np.array([[2, 3, 0, 0]])
    out = encoder_forward(ids, None, config, params)
    np.testing.assert_array_equal(out.states.data[0, 2:], 0.0)
    np.testing.assert_array_equal(out.padding_mask, [[True, True, False, False]])


def test_decoder_causality_bitwise():
    config = small_config()
    params = ParameterStore.initialize(config)
    enc_ids = np.array([[2, 3, 4, 5, 1]])
    dec_a = np.array([[0, 2, 3, 4]])
    dec_b = np.array([[0, 2, 3, 9]])  # perturb the last position
    la = seq2seq_logits(enc_ids, dec_a, config, params).data
    lb = seq2seq_logits(enc_ids, dec_b, config, params).data
    np.testing.assert_array_equal(la[0, :3], lb[0, :3])
    assert not np.array_equal(la[0, 3], lb[0, 3])


def test_tied_embedding_aliases_projection():
    config = small_config(tie_decoder_embedding=True)
    params = ParameterStore.initialize(config)
    enc = np.array([[2, 3, 1]])
    dec = np.array([[0, 2]])
    before = seq2seq_logits(enc, dec, config, params).data.copy()
    params["embedding"].data[5] += 0.25
    after = seq2seq_logits(enc, dec, config, params).data
    assert not np.array_equal(before, after)
    # unused vocab rows only influence their own logit column
    assert not np.array_equal(before[..., 5], after[..., 5])


def test_decoder_requires_layers():
    config = small_config(n_decoder_layers=0)
    params = ParameterStore.initialize(config)
    enc = encoder_forward(np.array([[2, 3]]), None, config, params)
    with pytest.raises(ModelError):
        decoder_forward(np.array([[0, 2]]), enc, config, params)


def test_shift_right():
    np.testing.assert_array_equal(shift_right(np.array([5, 6, 1])), [0, 5, 6])
    np.testing.assert_array_equal(
        shift_right(np.array([[5, 6, 1], [7, 1, 0]])), [[0, 5, 6], [0, 7, 1]]
    )


def _tensor_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def test_encoder_gradients_match_finite_differences():
    config = small_config()
    params = ParameterStore.initialize(config).astype(np.float64)
    rng = np.random.default_rng(3)
    ids = rng.integers(2, config.vocab_size, size=(2, 8))
    weight = rng.standard_normal((2, 8, config.d_model))

    def loss():
        out = encoder_forward(ids, None, config, params)
        return (out.states * Tensor(weight)).sum()

    loss().backward()
    for name in ("embedding", "relpos_bias", "encoder.0.attn.q", "encoder.0.ffn.wg"):
        numeric = ag.numerical_gradient(loss, params[name], eps=1e-4)
        assert _tensor_rel_error(params[name].grad, numeric) < 1e-4, name


def test_seq2seq_gradients_match_finite_differences():
    config = small_config()
    params = ParameterStore.initialize(config).astype(np.float64)
    rng = np.random.default_rng(4)
    enc_ids = rng.integers(2, config.vocab_size, size=(1, 6))
    dec_ids = rng.integers(2, config.vocab_size, size=(1, 4))
    weight = rng.standard_normal((1, 4, config.vocab_size))

    def loss():
        return (seq2seq_logits(enc_ids, dec_ids, config, params) * Tensor(weight)).sum()

    loss().backward()
    for name in ("decoder.0.cross.k", "decoder.0.attn.v", "lm_head", "decoder_norm"):
        numeric = ag.numerical_gradient(loss, params[name], eps=1e-4)
        assert _tensor_rel_error(params[name].grad, numeric) < 1e-4, name


# -- extraction ----------------------------------------------------------------------


def test_extract_embeddings_pooling_modes():
    config = small_config(vocab_size=VOCAB.size)
    params = ParameterStore.initialize(config)
    single = extract_embeddings(["A"], config, params, pooling="none")[0]
    mean = extract_embeddings(["A"], config, params, pooling="mean")[0]
    mx = extract_embeddings(["A"], config, params, pooling="max")[0]
    assert single.shape == (1, config.d_model)
    np.testing.assert_array_equal(single[0], mean)
    np.testing.assert_array_equal(single[0], mx)
    with pytest.raises(ValueError):
        extract_embeddings(["A"], config, params, pooling="median")


def test_extract_embeddings_match_encoder_forward():
    config = small_config(vocab_size=VOCAB.size)
    params = ParameterStore.initialize(config)
    seq = "ACDEFG"
    states = encoder_forward(np.array([VOCAB.encode(seq)]), None, config, params).states.data[0]
    got = extract_embeddings([seq], config, params, pooling="none")[0]
    np.testing.assert_array_equal(got, states)


def test_pooled_embedding_invariant_to_batch_padding():
    config = small_config(vocab_size=VOCAB.size)
    params = ParameterStore.initialize(config)
    alone = extract_embeddings(["ACDEF"], config, params, pooling="mean")[0]
    # batched with a longer companion, the record gets pad-extended
    together = extract_embeddings(["ACDEF", "MKTAYIAKQRQISFVK"], config, params, pooling="mean")[0]
    np.testing.assert_allclose(alone, together, atol=1e-6)


def test_attention_maps_shape_and_normalization():
    config = small_config(n_encoder_layers=3, vocab_size=VOCAB.size)
    params = ParameterStore.initialize(config)
    maps = extract_attention_maps("ACDEFGH", config, params)
    assert maps.shape == (3, config.n_heads, 7, 7)
    np.testing.assert_allclose(maps.sum(axis=-1), 1.0, atol=1e-6)
    tiny = extract_attention_maps("A", config, params)
    np.testing.assert_allclose(tiny, 1.0)
