"""Named experiment presets: a desk-scale pre-training ablation matrix.

The matrix walks one axis at a time, each leg inheriting the best setting
found on the previous one:

* exp0            baseline (S0, 15% masking, 6+6 layers, gated-GELU)
* exp1..exp6      masking strategy sweep at 15%
* exp7..exp9      masking probability sweep on S4 (10/20/30%)
* exp10..exp12    encoder/decoder depth splits at a fixed total, on S4 @ 20%
* exp13           wider embedding with half the layers
* exp14..exp15    ReLU feed-forward at two depth splits
* exp16..exp21    relative-position table size x bucket offset grid
* exp22           decoder embedding tied to the encoder's, on the exp20 winner
* exp23           the exp20 winner retrained on the alternate corpus, 1 epoch
"""

from __future__ import annotations

from spanforge.corruption import CorruptionSpec, Strategy
from spanforge.downstream import HeadType
from spanforge.harness import (
    ConfigError,
    ExperimentConfig,
    GenerationSettings,
    PretrainSettings,
    ProbeSettings,
    TaskSpec,
)
from spanforge.model import ModelConfig

__all__ = ["PRESETS", "DEFAULT_MATRIX", "default_tasks", "get_preset", "preset_names"]


def default_tasks() -> tuple[TaskSpec, ...]:
    """The builtin probe suite: one task per supported pooled/per-residue head."""
    return (
        TaskSpec(name="hydrophobic_fraction", head=HeadType.REGRESSION),
        TaskSpec(name="hydrophobic_rich", head=HeadType.BINARY),
        TaskSpec(name="dominant_group", head=HeadType.MULTICLASS, classes=3),
        TaskSpec(name="residue_group", head=HeadType.PER_RESIDUE_MULTICLASS, classes=3),
    )


def _preset(
    name: str,
    *,
    strategy: Strategy,
    probability: float = 0.15,
    layers: tuple[int, int] = (6, 6),
    d_model: int = 48,
    activation: str = "gated_gelu",
    relpos: tuple[int, int] = (32, 128),
    tie: bool = False,
    corpus: str = "builtin:demo",
    epochs: int = 2,
) -> ExperimentConfig:
    model = ModelConfig(
        d_model=d_model,
        n_heads=4,
        n_encoder_layers=layers[0],
        n_decoder_layers=layers[1],
        d_ff=4 * d_model,
        activation=activation,
        relpos_num_embeddings=relpos[0],
        relpos_offset=relpos[1],
        tie_decoder_embedding=tie,
        seed=42,
    )
    return ExperimentConfig(
        experiment=name,
        model=model,
        corruption=CorruptionSpec(strategy, probability, seed=0),
        train=PretrainSettings(epochs=epochs),
        probe=ProbeSettings(),
        generation=GenerationSettings(),
        corpus=corpus,
        tasks=default_tasks(),
    )


_BEST_SPLIT = (8, 4)  # encoder-heavy 2:1 depth split, the exp11 pick
_BEST_RELPOS = (64, 128)  # the exp20 pick

PRESETS: dict[str, ExperimentConfig] = {
    "exp0": _preset("exp0", strategy=Strategy.S0),
    "exp1": _preset("exp1", strategy=Strategy.S1),
    "exp2": _preset("exp2", strategy=Strategy.S2),
    "exp3": _preset("exp3", strategy=Strategy.S3),
    "exp4": _preset("exp4", strategy=Strategy.S4),
    "exp5": _preset("exp5", strategy=Strategy.S5),
    "exp6": _preset("exp6", strategy=Strategy.S6_LITERAL),
    "exp7": _preset("exp7", strategy=Strategy.S4, probability=0.10),
    "exp8": _preset("exp8", strategy=Strategy.S4, probability=0.20),
    "exp9": _preset("exp9", strategy=Strategy.S4, probability=0.30),
    "exp10": _preset("exp10", strategy=Strategy.S4, probability=0.20, layers=(9, 3)),
    "exp11": _preset("exp11", strategy=Strategy.S4, probability=0.20, layers=(8, 4)),
    "exp12": _preset("exp12", strategy=Strategy.S4, probability=0.20, layers=(4, 8)),
    "exp13": _preset("exp13", strategy=Strategy.S4, probability=0.20, layers=(4, 2), d_model=64),
    "exp14": _preset(
        "exp14", strategy=Strategy.S4, probability=0.20, layers=(10, 2), activation="relu"
    ),
    "exp15": _preset(
        "exp15", strategy=Strategy.S4, probability=0.20, layers=(8, 4), activation="relu"
    ),
    "exp16": _preset(
        "exp16", strategy=Strategy.S4, probability=0.20, layers=_BEST_SPLIT, relpos=(32, 256)
    ),
    "exp17": _preset(
        "exp17", strategy=Strategy.S4, probability=0.20, layers=_BEST_SPLIT, relpos=(32, 64)
    ),
    "exp18": _preset(
        "exp18", strategy=Strategy.S4, probability=0.20, layers=_BEST_SPLIT, relpos=(64, 64)
    ),
    "exp19": _preset(
        "exp19", strategy=Strategy.S4, probability=0.20, layers=_BEST_SPLIT, relpos=(16, 64)
    ),
    "exp20": _preset(
        "exp20", strategy=Strategy.S4, probability=0.20, layers=_BEST_SPLIT, relpos=_BEST_RELPOS
    ),
    "exp21": _preset(
        "exp21", strategy=Strategy.S4, probability=0.20, layers=_BEST_SPLIT, relpos=(128, 256)
    ),
    "exp22": _preset(
        "exp22",
        strategy=Strategy.S4,
        probability=0.20,
        layers=_BEST_SPLIT,
        relpos=_BEST_RELPOS,
        tie=True,
    ),
    "exp23": _preset(
        "exp23",
        strategy=Strategy.S4,
        probability=0.20,
        layers=_BEST_SPLIT,
        relpos=_BEST_RELPOS,
        corpus="builtin:demo2",
        epochs=1,
    ),
}

#: the quick smoke matrix: strategies plus the probability sweep
DEFAULT_MATRIX = tuple(f"exp{i}" for i in range(10))


def preset_names() -> list[str]:
    return list(PRESETS)


def get_preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(PRESETS)}"
        ) from None
