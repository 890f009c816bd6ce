"""Experiment harness: config files, staged runs, and report emission.

An experiment is pretraining + a set of downstream probes, described by a
single config (YAML file or named preset).  Every stage is deterministic,
so rerunning the same config produces byte-identical artifacts.
"""

from __future__ import annotations

import statistics
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from spanforge.checkpoint import load_checkpoint, save_checkpoint
from spanforge.corpus import SequenceRecord, load_labels, parse_fasta, write_fasta
from spanforge.corruption import CorruptionSpec, Strategy
from spanforge.downstream import (
    HeadType,
    ProbeConfig,
    ProbeTrainConfig,
    train_probe,
)
from spanforge.generation import GenerationConfig, generate_family, mlm_infill, uniqueness_report
from spanforge.metrics import AlignmentScoring, global_identity, internal_identity
from spanforge.model import ModelConfig, ParameterStore, extract_embeddings
from spanforge.training import FREEZE_ENCODER, TrainConfig, TrainingLog, fit

SCHEMA_VERSION = 1

__all__ = [
    "SCHEMA_VERSION",
    "HarnessError",
    "ConfigError",
    "StageError",
    "CheckpointRoundTripError",
    "TaskSpec",
    "PretrainSettings",
    "ProbeSettings",
    "GenerationSettings",
    "ExperimentConfig",
    "TaskRow",
    "ExperimentResult",
    "load_config",
    "dump_config",
    "config_to_dict",
    "config_from_dict",
    "demo_corpus",
    "builtin_label",
    "run_experiment",
    "run_matrix",
    "run_generation",
    "run_infill",
    "run_evaluation",
    "checkpoint_roundtrip",
    "emit_report",
]


class HarnessError(Exception):
    pass


class ConfigError(HarnessError):
    pass


class CheckpointRoundTripError(HarnessError):
    pass


class StageError(HarnessError):
    """A pipeline stage failed; carries the stage name for the CLI exit path."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# builtin corpora and label rules
# ---------------------------------------------------------------------------

HYDROPHOBIC = "AILMFVWY"
POLAR = "STNQCGP"
CHARGED = "DEKRH"
_GROUPS = (HYDROPHOBIC, POLAR, CHARGED)


def demo_corpus(n_records: int = 24, seed: int = 11, prefix: str = "demo") -> list[SequenceRecord]:
    """Small synthetic corpus with varied residue-group composition.

    Each record draws its residues from the three physicochemical groups with
    a per-record Dirichlet mixture, so the builtin labels are non-trivial.
    """
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_records):
        length = int(rng.integers(12, 23))
        weights = rng.dirichlet(np.ones(len(_GROUPS)))
        chars = []
        for _ in range(length):
            group = _GROUPS[int(rng.choice(len(_GROUPS), p=weights))]
            chars.append(group[int(rng.integers(len(group)))])
        records.append(SequenceRecord(id=f"{prefix}{i:03d}", sequence="".join(chars)))
    return records


def _group_counts(sequence: str) -> list[int]:
    return [sum(ch in group for ch in sequence) for group in _GROUPS]


def builtin_label(rule: str, record: SequenceRecord):
    """Label a record by one of the builtin rules (used when a task has no label file)."""
    if rule == "hydrophobic_fraction":
        return sum(ch in HYDROPHOBIC for ch in record.sequence) / len(record.sequence)
    if rule == "hydrophobic_rich":
        frac = sum(ch in HYDROPHOBIC for ch in record.sequence) / len(record.sequence)
        return int(frac > 0.4)
    if rule == "dominant_group":
        counts = _group_counts(record.sequence)
        return int(np.argmax(counts))
    if rule == "residue_group":
        table = {ch: g for g, group in enumerate(_GROUPS) for ch in group}
        return np.array([table[ch] for ch in record.sequence], dtype=np.int64)
    raise ConfigError(f"unknown builtin label rule {rule!r}")


_BUILTIN_RULE_HEADS = {
    "hydrophobic_fraction": HeadType.REGRESSION,
    "hydrophobic_rich": HeadType.BINARY,
    "dominant_group": HeadType.MULTICLASS,
    "residue_group": HeadType.PER_RESIDUE_MULTICLASS,
}

_BUILTIN_CORPORA = {
    "builtin:demo": lambda: demo_corpus(n_records=24, seed=11, prefix="demo"),
    "builtin:demo2": lambda: demo_corpus(n_records=18, seed=23, prefix="alt"),
}


def _load_corpus(spec: str) -> list[SequenceRecord]:
    if spec in _BUILTIN_CORPORA:
        return _BUILTIN_CORPORA[spec]()
    records = parse_fasta(spec)
    if not records:
        raise HarnessError(f"corpus {spec!r} contains no records")
    return records


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    """One downstream probe: where its data comes from and which head scores it."""

    name: str
    head: HeadType
    classes: int = 2
    fasta: str | None = None
    labels: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "head", HeadType(self.head))
        if not self.name:
            raise ConfigError("task name must be non-empty")
        if self.labels is None:
            rule_head = _BUILTIN_RULE_HEADS.get(self.name)
            if rule_head is None:
                raise ConfigError(
                    f"task {self.name!r} has no labels file and no builtin rule of that name"
                )
            if rule_head is not self.head:
                raise ConfigError(
                    f"task {self.name!r}: builtin rule expects head {rule_head.value!r}, "
                    f"config says {self.head.value!r}"
                )


@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 2
    batch_size: int = 4
    peak_lr: float = 3e-3
    warmup_steps: int = 8
    seed: int = 42


@dataclass(frozen=True)
class ProbeSettings:
    epochs: int = 4
    batch_size: int = 1
    peak_lr: float = 1e-3
    warmup_steps: int = 20
    seed: int = 7
    dropout: float = 0.2


@dataclass(frozen=True)
class GenerationSettings:
    num_beams: int = 3
    temperature: float = 1.0
    max_length: int = 48
    prompt_length: int = 10
    mask_probability: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: ModelConfig = ModelConfig()
    corruption: CorruptionSpec = CorruptionSpec(Strategy.S0)
    train: PretrainSettings = PretrainSettings()
    probe: ProbeSettings = ProbeSettings()
    generation: GenerationSettings = GenerationSettings()
    corpus: str = "builtin:demo"
    tasks: tuple[TaskSpec, ...] = ()
    report: str | None = None

    def __post_init__(self) -> None:
        if not self.experiment:
            raise ConfigError("experiment id must be non-empty")
        names = [task.name for task in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names in experiment {self.experiment!r}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override every run-level RNG seed at once (model init stays as configured)."""
        return replace(
            self,
            corruption=CorruptionSpec(self.corruption.strategy, self.corruption.probability, seed),
            train=replace(self.train, seed=seed),
            generation=replace(self.generation, seed=seed),
        )


def _check_keys(mapping: dict, allowed: set[str], where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _build(cls, mapping: dict, where: str):
    names = {f.name for f in fields(cls)}
    _check_keys(mapping, names, where)
    try:
        return cls(**mapping)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a mapping, got {type(raw).__name__}")
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    allowed = {
        "experiment",
        "model",
        "corruption",
        "train",
        "probe",
        "generation",
        "corpus",
        "tasks",
        "report",
    }
    _check_keys(raw, allowed, "config")
    if "experiment" not in raw:
        raise ConfigError("config needs an 'experiment' id")

    tasks = []
    for i, entry in enumerate(raw.get("tasks", []) or []):
        if not isinstance(entry, dict):
            raise ConfigError(f"tasks[{i}] must be a mapping")
        tasks.append(_build(TaskSpec, entry, f"tasks[{i}]"))

    corruption_raw = dict(raw.get("corruption", {}) or {})
    _check_keys(corruption_raw, {"strategy", "probability", "seed"}, "corruption")
    if "strategy" in corruption_raw:
        try:
            corruption_raw["strategy"] = Strategy(corruption_raw["strategy"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        corruption_raw["strategy"] = Strategy.S0
    try:
        corruption = CorruptionSpec(**corruption_raw)
    except ValueError as exc:
        raise ConfigError(f"bad corruption: {exc}") from exc

    model_raw = dict(raw.get("model", {}) or {})
    if "relpos" in model_raw:  # shorthand: [num_embeddings, offset]
        pair = model_raw.pop("relpos")
        model_raw["relpos_num_embeddings"], model_raw["relpos_offset"] = int(pair[0]), int(pair[1])

    return ExperimentConfig(
        experiment=str(raw["experiment"]),
        model=_build(ModelConfig, model_raw, "model"),
        corruption=corruption,
        train=_build(PretrainSettings, dict(raw.get("train", {}) or {}), "train"),
        probe=_build(ProbeSettings, dict(raw.get("probe", {}) or {}), "probe"),
        generation=_build(
            GenerationSettings, dict(raw.get("generation", {}) or {}), "generation"
        ),
        corpus=str(raw.get("corpus", "builtin:demo")),
        tasks=tuple(tasks),
        report=raw.get("report"),
    )


def config_to_dict(config: ExperimentConfig) -> dict:
    def plain(obj) -> dict:
        out = {}
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, Strategy):
                value = value.value
            elif isinstance(value, HeadType):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": config.experiment,
        "model": plain(config.model),
        "corruption": plain(config.corruption),
        "train": plain(config.train),
        "probe": plain(config.probe),
        "generation": plain(config.generation),
        "corpus": config.corpus,
        "tasks": [plain(task) for task in config.tasks],
        "report": config.report,
    }


def _resolve_paths(config: ExperimentConfig, base_dir: Path) -> ExperimentConfig:
    def resolved(path: str | None) -> str | None:
        if path is None:
            return None
        p = Path(path)
        return str(p if p.is_absolute() else base_dir / p)

    tasks = tuple(
        replace(task, fasta=resolved(task.fasta), labels=resolved(task.labels))
        for task in config.tasks
    )
    corpus = config.corpus
    if not corpus.startswith("builtin:"):
        corpus = resolved(corpus)
    return replace(config, corpus=corpus, tasks=tasks)


def validate_config(config: ExperimentConfig) -> None:
    """Every file the config points at must exist before anything runs."""
    missing = []
    if not config.corpus.startswith("builtin:") and not Path(config.corpus).is_file():
        missing.append(("corpus", config.corpus))
    if config.corpus.startswith("builtin:") and config.corpus not in _BUILTIN_CORPORA:
        raise ConfigError(
            f"unknown builtin corpus {config.corpus!r}; have {sorted(_BUILTIN_CORPORA)}"
        )
    for task in config.tasks:
        for kind, path in (("fasta", task.fasta), ("labels", task.labels)):
            if path is not None and not Path(path).is_file():
                missing.append((f"task {task.name} {kind}", path))
    if missing:
        lines = ", ".join(f"{kind}: {path}" for kind, path in missing)
        raise ConfigError(f"referenced file(s) do not exist ({lines})")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    config = _resolve_paths(config_from_dict(raw), path.parent)
    validate_config(config)
    return config


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(config), sort_keys=False))


# ---------------------------------------------------------------------------
# running experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskRow:
    """One report cell: a task's held-out metric and whether it's percent-like."""

    name: str
    metric: str
    value: float
    percent: bool


@dataclass
class ExperimentResult:
    experiment: str
    steps: int
    final_loss: float
    rows: tuple[TaskRow, ...]
    out_dir: Path
    checkpoint_path: Path
    log_path: Path
    report_path: Path | None = None

    @property
    def percent_values(self) -> list[float]:
        return [row.value for row in self.rows if row.percent]


def _task_records(config: ExperimentConfig, task: TaskSpec, corpus: list[SequenceRecord]):
    records = parse_fasta(task.fasta) if task.fasta is not None else corpus
    if task.labels is not None:
        table = load_labels(task.labels)
        pairs = []
        for record in records:
            if record.id not in table:
                raise HarnessError(f"task {task.name}: no label for record {record.id!r}")
            raw = table[record.id]
            if task.head is HeadType.REGRESSION:
                label = float(raw)
            elif task.head is HeadType.PER_RESIDUE_MULTICLASS:
                label = np.array([int(ch) for ch in raw], dtype=np.int64)
            else:
                label = int(raw)
            pairs.append((record, label))
        return pairs
    return [(record, builtin_label(task.name, record)) for record in records]


def _split(pairs: list) -> tuple[list, list]:
    train = [pair for i, pair in enumerate(pairs) if i % 3 != 2]
    heldout = [pair for i, pair in enumerate(pairs) if i % 3 == 2]
    return train, heldout


_METRIC_BY_HEAD = {
    HeadType.REGRESSION: ("rho", False),
    HeadType.BINARY: ("acc", True),
    HeadType.MULTICLASS: ("acc", True),
    HeadType.PER_RESIDUE_MULTICLASS: ("acc", True),
    HeadType.RESIDUE_PAIR_BINARY: ("prec", True),
}


def _run_probe(config: ExperimentConfig, task: TaskSpec, corpus, params) -> TaskRow:
    pairs = _task_records(config, task, corpus)
    records = [record for record, _ in pairs]
    embeddings = extract_embeddings(records, config.model, params, pooling="none")
    dataset = [(emb, label) for emb, (_, label) in zip(embeddings, pairs)]
    train_set, eval_set = _split(dataset)
    probe_cfg = ProbeConfig(
        input_dim=config.model.d_model,
        head_type=task.head,
        num_classes=task.classes,
        dropout=config.probe.dropout,
    )
    probe_train = ProbeTrainConfig(
        peak_lr=config.probe.peak_lr,
        epochs=config.probe.epochs,
        batch_size=config.probe.batch_size,
        warmup_steps=config.probe.warmup_steps,
        seed=config.probe.seed,
    )
    result = train_probe(train_set, eval_set, probe_cfg, probe_train)
    metric, percent = _METRIC_BY_HEAD[task.head]
    return TaskRow(name=task.name, metric=metric, value=result.metric, percent=percent)


def _pretrain(config: ExperimentConfig, corpus, out_dir: Path) -> tuple[ParameterStore, TrainingLog]:
    params = ParameterStore.initialize(config.model)
    train_cfg = TrainConfig(
        epochs=config.train.epochs,
        batch_size=config.train.batch_size,
        peak_lr=config.train.peak_lr,
        warmup_steps=config.train.warmup_steps,
        seed=config.train.seed,
        checkpoint_path=str(out_dir / "model.ckpt"),
        log_path=str(out_dir / "train_log.tsv"),
    )
    log = fit(config.model, params, corpus, config.corruption, train_cfg)
    return params, log


def run_experiment(
    config: ExperimentConfig, out_dir=".", format: str = "tsv"
) -> ExperimentResult:
    """Pretrain, probe every task, and write the per-experiment report.

    Artifacts land in <out_dir>/<experiment>/: model.ckpt, train_log.tsv and
    report.tsv (or report.txt for the table format).  Reruns are byte-identical.
    """
    validate_config(config)
    exp_dir = Path(out_dir) / config.experiment
    exp_dir.mkdir(parents=True, exist_ok=True)

    with _stage("load-corpus"):
        corpus = _load_corpus(config.corpus)

    with _stage("pretrain"):
        params, log = _pretrain(config, corpus, exp_dir)

    rows = []
    for task in config.tasks:
        with _stage(f"probe:{task.name}"):
            rows.append(_run_probe(config, task, corpus, params))

    with _stage("report"):
        result = ExperimentResult(
            experiment=config.experiment,
            steps=len(log.entries),
            final_loss=log.losses[-1],
            rows=tuple(rows),
            out_dir=exp_dir,
            checkpoint_path=exp_dir / "model.ckpt",
            log_path=exp_dir / "train_log.tsv",
        )
        if config.report is not None:
            report_path = Path(config.report)
        else:
            report_path = exp_dir / ("report.tsv" if format == "tsv" else "report.txt")
        report_path.write_text(emit_report([result], format=format))
        result.report_path = report_path
    return result


def run_pretraining(config: ExperimentConfig, out_dir=".") -> Path:
    """Pretraining only: fit on the corpus, save checkpoint + training log,
    and return the checkpoint path."""
    validate_config(config)
    exp_dir = Path(out_dir) / config.experiment
    exp_dir.mkdir(parents=True, exist_ok=True)
    with _stage("load-corpus"):
        corpus = _load_corpus(config.corpus)
    with _stage("pretrain"):
        _pretrain(config, corpus, exp_dir)
    return exp_dir / "model.ckpt"


def run_matrix(configs, out_dir=".", format: str = "tsv") -> tuple[list[ExperimentResult], Path]:
    """Run several experiments and emit one combined report table."""
    configs = list(configs)
    ids = [config.experiment for config in configs]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ConfigError(f"experiment ids must be unique within a matrix, repeated: {dupes}")
    results = [run_experiment(config, out_dir=out_dir, format=format) for config in configs]
    with _stage("report"):
        name = "matrix_report.tsv" if format == "tsv" else "matrix_report.txt"
        combined = Path(out_dir) / name
        combined.write_text(emit_report(results, format=format))
    return results, combined


# ---------------------------------------------------------------------------
# generation / infill / evaluation verbs
# ---------------------------------------------------------------------------


def _ensure_params(config: ExperimentConfig, corpus, exp_dir: Path) -> ParameterStore:
    """Load the experiment checkpoint if present, else pretrain and save it."""
    ckpt = exp_dir / "model.ckpt"
    if ckpt.is_file():
        loaded = load_checkpoint(ckpt)
        if loaded.config != config.model:
            raise HarnessError(
                f"checkpoint {ckpt} was written with a different model config; "
                "remove it or change --out"
            )
        return loaded.params
    params, _ = _pretrain(config, corpus, exp_dir)
    return params


def _generation_config(config: ExperimentConfig) -> GenerationConfig:
    g = config.generation
    return GenerationConfig(
        num_beams=g.num_beams,
        temperature=g.temperature,
        max_length=g.max_length,
        prompt_length=g.prompt_length,
        mask_probability=g.mask_probability,
        seed=g.seed,
    )


def run_generation(config: ExperimentConfig, out_dir=".", n_prompts: int = 3) -> Path:
    """Fine-tune with the encoder frozen, then beam-generate continuations
    of the first few corpus records.  Writes <out>/<experiment>/generated.fasta."""
    validate_config(config)
    exp_dir = Path(out_dir) / config.experiment
    exp_dir.mkdir(parents=True, exist_ok=True)
    with _stage("load-corpus"):
        corpus = _load_corpus(config.corpus)
    with _stage("pretrain"):
        params = _ensure_params(config, corpus, exp_dir)
    with _stage("finetune"):
        tune_cfg = TrainConfig(
            epochs=1,
            batch_size=config.train.batch_size,
            peak_lr=3e-4,
            warmup_steps=2,
            seed=config.train.seed + 1,
            freeze=FREEZE_ENCODER,
        )
        fit(config.model, params, corpus, config.corruption, tune_cfg)
    with _stage("generate"):
        prompts = corpus[:n_prompts]
        records = generate_family(config.model, params, prompts, _generation_config(config))
        out_path = exp_dir / "generated.fasta"
        write_fasta(records, out_path)
    return out_path


def run_infill(config: ExperimentConfig, out_dir=".", n_records: int = 2) -> Path:
    """Mask-and-refill the first few corpus records; writes infilled.fasta."""
    validate_config(config)
    exp_dir = Path(out_dir) / config.experiment
    exp_dir.mkdir(parents=True, exist_ok=True)
    with _stage("load-corpus"):
        corpus = _load_corpus(config.corpus)
    with _stage("pretrain"):
        params = _ensure_params(config, corpus, exp_dir)
    with _stage("infill"):
        gen_cfg = _generation_config(config)
        records = []
        for record in corpus[:n_records]:
            records.extend(mlm_infill(config.model, params, record, gen_cfg))
        out_path = exp_dir / "infilled.fasta"
        write_fasta(records, out_path)
    return out_path


def run_evaluation(config: ExperimentConfig, out_dir=".") -> Path:
    """Score generated.fasta against the corpus (novelty + identity); writes
    evaluate.tsv.  Runs the generation verb first if its output is missing."""
    validate_config(config)
    exp_dir = Path(out_dir) / config.experiment
    generated_path = exp_dir / "generated.fasta"
    if not generated_path.is_file():
        run_generation(config, out_dir=out_dir)
    with _stage("load-corpus"):
        corpus = _load_corpus(config.corpus)
    with _stage("evaluate"):
        generated = parse_fasta(generated_path)
        report = uniqueness_report(generated, corpus)
        scoring = AlignmentScoring()
        best_identity = []
        for item in generated:
            best = max(
                global_identity(item.sequence, ref.sequence, scoring=scoring).identity
                for ref in corpus
            )
            best_identity.append(best)
        lines = [
            "metric\tvalue",
            f"unique_fraction\t{report['unique_fraction']:.4f}",
            f"mean_best_identity_vs_corpus\t{float(np.mean(best_identity)):.4f}",
        ]
        if len(generated) >= 2:
            internal = internal_identity([r.sequence for r in generated])
            lines.append(f"internal_identity_mean\t{internal.mean:.4f}")
        out_path = exp_dir / "evaluate.tsv"
        out_path.write_text("\n".join(lines) + "\n")
    return out_path


def checkpoint_roundtrip(params: ParameterStore, path) -> ParameterStore:
    """Save, reload, and verify bit-exact equality of every tensor; returns
    the reloaded store or raises CheckpointRoundTripError."""
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    if loaded.config != params.config:
        raise CheckpointRoundTripError(f"config changed across round trip via {path}")
    saved_names = [name for name, _ in params.items()]
    loaded_names = [name for name, _ in loaded.params.items()]
    if saved_names != loaded_names:
        raise CheckpointRoundTripError(f"parameter names changed across round trip via {path}")
    for name, tensor in params.items():
        other = loaded.params[name].data
        if tensor.data.dtype != other.dtype or tensor.data.shape != other.shape:
            raise CheckpointRoundTripError(f"{name}: dtype/shape changed across round trip")
        if tensor.data.tobytes() != other.tobytes():
            raise CheckpointRoundTripError(f"{name}: bytes changed across round trip")
    return loaded.params


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _report_grid(results) -> tuple[list[str], list[list[str]]]:
    results = list(results)
    task_names: list[str] = []
    for result in results:
        for row in result.rows:
            if row.name not in task_names:
                task_names.append(row.name)
    header = ["experiment", "steps", "final_loss", *task_names, "Avg.", "Med."]
    grid = []
    for result in results:
        by_name = {row.name: row for row in result.rows}
        cells = [result.experiment, str(result.steps), f"{result.final_loss:.4f}"]
        for name in task_names:
            row = by_name.get(name)
            cells.append("-" if row is None else f"{row.value:.4f}")
        percent = result.percent_values
        if percent:
            cells.append(f"{sum(percent) / len(percent):.4f}")
            cells.append(f"{statistics.median(percent):.4f}")
        else:
            cells.extend(["-", "-"])
        grid.append(cells)
    return header, grid


def emit_report(results, format: str = "tsv") -> str:
    """Render results as one row per experiment, tasks in first-seen order,
    then Avg. and Med. over the percent-type metrics only (rho never averages
    with accuracies).  Output is deterministic: no timestamps, fixed formats."""
    if format not in ("tsv", "table"):
        raise ValueError(f"format must be 'tsv' or 'table', got {format!r}")
    header, grid = _report_grid(results)
    if format == "tsv":
        lines = ["\t".join(header)]
        lines.extend("\t".join(cells) for cells in grid)
        return "\n".join(lines) + "\n"
    widths = [len(h) for h in header]
    for cells in grid:
        widths = [max(w, len(c)) for w, c in zip(widths, cells)]
    def fmt(cells: list[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join([first, *rest]).rstrip()
    rule = "  ".join("-" * w for w in widths)
    lines = [fmt(header), rule]
    lines.extend(fmt(cells) for cells in grid)
    return "\n".join(lines) + "\n"
