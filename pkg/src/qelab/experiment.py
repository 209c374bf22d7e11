"""Experiment driver: config parsing, the training loop, evaluation,
and deterministic run reports.

A run is fully determined by its config (the seed is part of it): data
generation/splitting, parameter init, batch order, and every update are
seeded, and the report is serialized with sorted keys so two identical
runs produce byte-identical ``report.json``. Wall-clock time goes to a
``timing.json`` sidecar to keep the report deterministic.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .aggregators import (
    LossHistory,
    NashSolverConfig,
    aggregate_aligned,
    aggregate_dwa,
    aggregate_imtl,
    aggregate_linear,
    aggregate_nash,
)
from .data import (
    EMOTIONS,
    OK,
    BAD,
    QEInstance,
    SyntheticSpec,
    generate_synthetic,
    instance_to_record,
    load_dataset,
    split_dataset,
)
from .metrics import ZeroVariance, macro_prf, pearson, spearman
from .model import (
    ModelConfig,
    Parameters,
    TASKS,
    build_vocab,
    encode_instance,
    file_sha256,
    forward,
    init_params,
    make_batch,
    save_checkpoint,
    task_losses,
    backward_per_task,
)
from .optim import AdamWConfig, OptimizerStates, ScheduleConfig, lr_at, mtl_step

AGGREGATOR_KINDS = ("linear", "nash", "aligned", "dwa", "imtl")


class ConfigError(ValueError):
    """The experiment config is structurally or semantically invalid."""


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "linear"
    tol: float = 1e-8
    max_iter: int = 200
    damping: float = 0.5
    rank_tol: float = 1e-10
    temperature: float = 2.0
    importance: tuple[float, ...] | None = None  # linear/aligned task weights

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigError(f"aggregator kind must be one of {AGGREGATOR_KINDS}")


@dataclass(frozen=True)
class OptimConfig:
    # 1e-3 suits the compact trainable encoder; 2e-5 is the setting used
    # with large pretrained encoders and stays available via config.
    base_lr: float = 1e-3
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class ModelSettings:
    d_model: int = 64
    n_layers: int = 2
    d_ff: int | None = None
    max_len: int = 200
    pooling: str = "max"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    dataset_path: str | None = None
    synthetic: SyntheticSpec | None = None
    tasks: tuple[str, ...] = ("sentence", "word")
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int | None = None  # default: 2 single-task, 10 multi-task
    batch_size: int = 8

    def __post_init__(self):
        if (self.dataset_path is None) == (self.synthetic is None):
            raise ConfigError("config needs exactly one of dataset.path or dataset.synthetic")
        tasks = tuple(t for t in TASKS if t in self.tasks)
        if not tasks or len(tasks) != len(self.tasks):
            raise ConfigError(f"tasks must be a nonempty subset of {TASKS}, got {self.tasks}")
        object.__setattr__(self, "tasks", tasks)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be at least 1")

    @property
    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 2 if len(self.tasks) == 1 else 10


def _pluck(d: dict, allowed, where: str) -> dict:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _pluck(raw, {"seed", "dataset", "tasks", "aggregator", "model", "optim",
                 "epochs", "batch_size"}, "config")
    if "seed" not in raw:
        raise ConfigError("config requires an explicit seed")
    dataset = raw.get("dataset")
    if not isinstance(dataset, dict):
        raise ConfigError("config requires a dataset object")
    _pluck(dataset, {"path", "synthetic"}, "dataset")
    synthetic = None
    if "synthetic" in dataset:
        syn = dict(dataset["synthetic"])
        _pluck(syn, {"n_instances", "seed", "vocab_size", "bad_token_rates",
                     "markers_per_class", "src_len_range", "emotion_probs",
                     "corruption_style", "invisible_bad_fraction",
                     "substitutes_per_severity", "bad_count_range"},
               "dataset.synthetic")
        syn.setdefault("seed", raw["seed"])
        if "src_len_range" in syn:
            syn["src_len_range"] = tuple(syn["src_len_range"])
        if syn.get("bad_count_range") is not None:
            syn["bad_count_range"] = tuple(syn["bad_count_range"])
        if syn.get("emotion_probs") is not None:
            syn["emotion_probs"] = tuple(syn["emotion_probs"])
        try:
            synthetic = SyntheticSpec(**syn)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from exc
    try:
        agg = AggregatorConfig(**_pluck(dict(raw.get("aggregator", {})),
                                        {"kind", "tol", "max_iter", "damping", "rank_tol",
                                         "temperature", "importance"}, "aggregator"))
        if agg.importance is not None:
            agg = AggregatorConfig(**{**asdict(agg), "importance": tuple(agg.importance)})
        model = ModelSettings(**_pluck(dict(raw.get("model", {})),
                                       {"d_model", "n_layers", "d_ff", "max_len", "pooling"},
                                       "model"))
        optim = OptimConfig(**_pluck(dict(raw.get("optim", {})),
                                     {"base_lr", "warmup_fraction", "beta1", "beta2",
                                      "eps", "weight_decay"}, "optim"))
        return ExperimentConfig(
            seed=int(raw["seed"]),
            dataset_path=dataset.get("path"),
            synthetic=synthetic,
            tasks=tuple(raw.get("tasks", ("sentence", "word"))),
            aggregator=agg,
            model=model,
            optim=optim,
            epochs=raw.get("epochs"),
            batch_size=int(raw.get("batch_size", 8)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: ExperimentConfig) -> dict:
    dataset = {"path": cfg.dataset_path} if cfg.dataset_path else {
        "synthetic": {
            "n_instances": cfg.synthetic.n_instances,
            "seed": cfg.synthetic.seed,
            "vocab_size": cfg.synthetic.vocab_size,
            "bad_token_rates": dict(cfg.synthetic.bad_token_rates),
            "markers_per_class": cfg.synthetic.markers_per_class,
            "src_len_range": list(cfg.synthetic.src_len_range),
            "emotion_probs": list(cfg.synthetic.emotion_probs)
            if cfg.synthetic.emotion_probs is not None else None,
            "corruption_style": cfg.synthetic.corruption_style,
            "invisible_bad_fraction": cfg.synthetic.invisible_bad_fraction,
            "substitutes_per_severity": cfg.synthetic.substitutes_per_severity,
            "bad_count_range": list(cfg.synthetic.bad_count_range)
            if cfg.synthetic.bad_count_range is not None else None,
        }
    }
    return {
        "seed": cfg.seed,
        "dataset": dataset,
        "tasks": list(cfg.tasks),
        "aggregator": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in asdict(cfg.aggregator).items()},
        "model": asdict(cfg.model),
        "optim": asdict(cfg.optim),
        "epochs": cfg.resolved_epochs,
        "batch_size": cfg.batch_size,
    }


def make_aggregate_fn(cfg: AggregatorConfig, n_tasks: int, hist: LossHistory):
    """Bind an aggregator config (and epoch state) to a G -> result callable."""
    w = None
    if cfg.importance is not None:
        if len(cfg.importance) != n_tasks:
            raise ConfigError("importance length must match the task count")
        w = np.asarray(cfg.importance, dtype=np.float64)
    if cfg.kind == "linear":
        return lambda g: aggregate_linear(g, w)
    if cfg.kind == "nash":
        ncfg = NashSolverConfig(tol=cfg.tol, max_iter=cfg.max_iter, damping=cfg.damping)
        return lambda g: aggregate_nash(g, ncfg)
    if cfg.kind == "aligned":
        return lambda g: aggregate_aligned(g, w, rank_tol=cfg.rank_tol)
    if cfg.kind == "dwa":
        return lambda g: aggregate_dwa(g, hist, temperature=cfg.temperature)
    return lambda g: aggregate_imtl(g)


@dataclass
class ScoreNorm:
    mean: float
    std: float

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    @staticmethod
    def fit(scores) -> "ScoreNorm":
        scores = np.asarray(scores, dtype=np.float64)
        std = float(scores.std())
        return ScoreNorm(mean=float(scores.mean()), std=std if std > 1e-12 else 1.0)


def _batched(encoded, batch_size):
    for start in range(0, len(encoded), batch_size):
        yield encoded[start : start + batch_size]


def evaluate_split(params: Parameters, encoded, norm: ScoreNorm, batch_size: int) -> dict:
    """Test metrics for every enabled task over an encoded split."""
    tasks = params.config.enabled_tasks
    sent_pred, sent_gold = [], []
    word_pred, word_gold = [], []
    emo_pred, emo_gold = [], []
    for chunk in _batched(encoded, batch_size):
        batch, targets = make_batch(chunk)
        preds, _ = forward(params, batch)
        if "sentence" in tasks:
            sent_pred.extend(norm.denormalize(preds.sentence).tolist())
            sent_gold.extend(targets.qe_score.tolist())
        if "word" in tasks:
            hard = np.argmax(preds.word_probs, axis=-1)
            for i in range(batch.ids.shape[0]):
                pos = batch.word_mask[i]
                word_pred.extend(BAD if x else OK for x in hard[i][pos])
                word_gold.extend(BAD if x else OK for x in targets.word_labels[i][pos])
        if "emotion" in tasks:
            hard = np.argmax(preds.emotion_probs, axis=-1)
            emo_pred.extend(EMOTIONS[j] for j in hard)
            emo_gold.extend(EMOTIONS[j] for j in targets.emotion)
    out = {}
    if "sentence" in tasks:
        try:
            out["sentence"] = {
                "spearman": spearman(sent_pred, sent_gold),
                "pearson": pearson(sent_pred, sent_gold),
            }
        except ZeroVariance:
            out["sentence"] = {"spearman": None, "pearson": None}
    if "word" in tasks:
        f, p, r = macro_prf(word_pred, word_gold, (OK, BAD))
        out["word"] = {"f1": f, "precision": p, "recall": r}
    if "emotion" in tasks:
        f, p, r = macro_prf(emo_pred, emo_gold, EMOTIONS)
        out["emotion"] = {"f1": f, "precision": p, "recall": r}
    return out


def _dataset_digest(instances) -> str:
    import hashlib

    digest = hashlib.sha256()
    for inst in instances:
        digest.update(json.dumps(instance_to_record(inst), sort_keys=True).encode())
        digest.update(b"\n")
    return digest.hexdigest()


@dataclass
class RunResult:
    report: dict
    params: Parameters
    vocab: object
    norm: "ScoreNorm"
    wall_clock: float


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    t_start = time.perf_counter()
    if cfg.synthetic is not None:
        instances = generate_synthetic(cfg.synthetic)
        dataset_info = {"kind": "synthetic", "sha256": _dataset_digest(instances)}
    else:
        instances = load_dataset(cfg.dataset_path)
        dataset_info = {"kind": "file", "sha256": file_sha256(cfg.dataset_path)}
    split = split_dataset(instances, cfg.seed)
    vocab = build_vocab(split.train)
    norm = ScoreNorm.fit([inst.qe_score for inst in split.train])

    model_cfg = ModelConfig(
        vocab_size=len(vocab),
        d_model=cfg.model.d_model,
        n_layers=cfg.model.n_layers,
        d_ff=cfg.model.d_ff,
        max_len=cfg.model.max_len,
        pooling=cfg.model.pooling,
        enabled_tasks=cfg.tasks,
    )
    enc_train = [encode_instance(i, vocab, model_cfg.max_len) for i in split.train]
    enc_test = [encode_instance(i, vocab, model_cfg.max_len) for i in split.test]

    params = init_params(model_cfg, cfg.seed)
    tasks = model_cfg.enabled_tasks
    n_train = len(enc_train)
    batches_per_epoch = (n_train + cfg.batch_size - 1) // cfg.batch_size
    epochs = cfg.resolved_epochs
    schedule = ScheduleConfig(
        base_lr=cfg.optim.base_lr,
        total_steps=epochs * batches_per_epoch,
        warmup_fraction=cfg.optim.warmup_fraction,
    )
    adam = AdamWConfig(beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
                       eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay)
    states = OptimizerStates.for_params(params)
    hist = LossHistory.empty(len(tasks))
    shuffle_rng = np.random.default_rng(cfg.seed)

    epoch_records = []
    step = 0
    for epoch in range(1, epochs + 1):
        agg_fn = make_aggregate_fn(cfg.aggregator, len(tasks), hist)
        order = shuffle_rng.permutation(n_train)
        loss_sums = np.zeros(len(tasks))
        alpha_sums = np.zeros(len(tasks))
        kappa_sum, kappa_n = 0.0, 0
        sys_kappa_sum, sys_kappa_n = 0.0, 0
        fallbacks = 0
        n_steps = 0
        for start in range(0, n_train, cfg.batch_size):
            chunk = [enc_train[i] for i in order[start : start + cfg.batch_size]]
            batch, targets = make_batch(chunk, normalize_score=norm.normalize)
            preds, cache = forward(params, batch)
            losses = task_losses(preds, targets, batch)
            grad_matrix, head_grads = backward_per_task(params, cache, targets)
            result = mtl_step(params, grad_matrix, head_grads, agg_fn,
                              lr_at(step, schedule), states, adam)
            step += 1
            n_steps += 1
            enabled = losses.enabled()
            loss_sums += np.array([enabled[t] for t in tasks])
            alpha_sums += result.alpha
            fallbacks += int(result.fallback)
            raw_kappa = result.extras.get("raw_condition_number", result.condition_number)
            if raw_kappa is not None:
                kappa_sum += raw_kappa
                kappa_n += 1
            if result.condition_number is not None:
                sys_kappa_sum += result.condition_number
                sys_kappa_n += 1
        mean_losses = loss_sums / n_steps
        hist = hist.with_epoch(mean_losses)
        record = {
            "epoch": epoch,
            "mean_losses": {t: float(l) for t, l in zip(tasks, mean_losses)},
            "mean_alpha": {t: float(a) for t, a in zip(tasks, alpha_sums / n_steps)},
            "fallback_count": fallbacks,
            "mean_condition_number": kappa_sum / kappa_n if kappa_n else None,
        }
        if cfg.aggregator.kind == "aligned":
            record["mean_aligned_condition_number"] = (
                sys_kappa_sum / sys_kappa_n if sys_kappa_n else None
            )
        epoch_records.append(record)

    test_metrics = evaluate_split(params, enc_test, norm, cfg.batch_size)
    wall = time.perf_counter() - t_start

    report = {
        "version": __version__,
        "config": config_to_dict(cfg),
        "dataset": {
            **dataset_info,
            "n_instances": len(instances),
            "n_train": len(split.train),
            "n_validation": len(split.validation),
            "n_test": len(split.test),
        },
        "model": {
            "vocab_size": len(vocab),
            "n_shared_params": params.n_shared,
            "n_head_params": {t: params.heads[t].size for t in tasks},
        },
        "epochs": epoch_records,
        "test_metrics": test_metrics,
    }
    return RunResult(report=report, params=params, vocab=vocab, norm=norm, wall_clock=wall)


def save_run(result: RunResult, out_dir) -> dict:
    """Write report.json, timing.json, and the checkpoint pair; returns
    the final report (with checksums) as written."""
    vocab, norm = result.vocab, result.norm
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bin_path = out / "checkpoint.bin"
    manifest_path = out / "checkpoint.json"
    save_checkpoint(
        result.params,
        bin_path,
        manifest_path,
        extra={
            "seed": result.report["config"]["seed"],
            "vocab": list(vocab.tokens),
            "score_norm": {"mean": norm.mean, "std": norm.std},
        },
    )
    report = dict(result.report)
    report["checksums"] = {
        "checkpoint_bin": file_sha256(bin_path),
        "checkpoint_manifest": file_sha256(manifest_path),
    }
    report_path = out / "report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    with open(out / "timing.json", "w", encoding="utf-8") as fh:
        json.dump({"wall_clock_seconds": result.wall_clock}, fh, indent=2)
        fh.write("\n")
    return report
