"""Iterative train / embed / correct loop with schedules, metrics, and reports.

Each episode reinitializes the classifier, trains it on a blend of current and
original labels, extracts deep embeddings, and corrects labels by neighbor
vote — either against the whole dataset or against a per-class low-loss
reference subset. The blend weight decays and the reference percentage grows
on fixed schedules; once the percentage hits 100 the selective mode hands over
to whole-dataset correction.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import knn, noise as noise_mod, trainer
from .data import EmbeddingSet, LabeledDataset
from .knn import VoteConfig, clamp_k, correct_iterknn, correct_selknn, predict_deep_knn
from .noise import NoiseSpec
from .trainer import (Classifier, LossConfig, OptimizerParams, embed_all,
                      head_accuracy, init_classifier, train_episode)

logger = logging.getLogger(__name__)

ITERKNN = "iterknn"
SELKNN = "selknn"
CORRECTIONS = (ITERKNN, SELKNN)

REFERENCE_CORRECTED = "corrected"
REFERENCE_CLEAN_SUBSET = "clean_subset"

# Seed-derivation stream codes, combined with the root seed and episode index.
_INIT, _TRAIN, _FINAL = 1, 2, 3

CSV_COLUMNS = (
    "episode", "gamma", "m_percent", "recovery_rate", "error_rate",
    "train_accuracy", "test_accuracy_head", "test_accuracy_knn", "labels_changed",
)


class ConfigError(ValueError):
    """Invalid or unknown pipeline configuration."""


@dataclass(frozen=True)
class ClassifierSpec:
    hidden_sizes: tuple[int, ...] = (64,)
    embedding_layer: int | None = None

    def layer_sizes(self, input_dim: int, num_classes: int) -> tuple[int, ...]:
        return (input_dim, *self.hidden_sizes, num_classes)


@dataclass(frozen=True)
class PipelineConfig:
    episodes: int = 10
    epochs_per_episode: int = 30
    batch_size: int = 256
    k: int = 100
    metric: str = knn.L2
    vote_scheme: str = knn.HARD_MAJORITY
    tie_rule: str = knn.NEAREST_NEIGHBOR_WINS
    vote_epsilon: float = 1e-8
    correction: str = SELKNN
    gamma_init: float = 1.0
    gamma_decay_factor: float = 1.2
    selknn_m_init_percent: float = 20.0
    selknn_m_increment_percent: float = 10.0
    deep_knn_reference: str = REFERENCE_CORRECTED
    seed: int = 0
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    optimizer: OptimizerParams = field(default_factory=OptimizerParams)
    loss: LossConfig = field(default_factory=LossConfig)
    noise: NoiseSpec | None = None

    def __post_init__(self) -> None:
        if self.episodes < 1:
            raise ConfigError(f"episodes must be >= 1, got {self.episodes}")
        if self.epochs_per_episode < 1:
            raise ConfigError(f"epochs_per_episode must be >= 1, got {self.epochs_per_episode}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.metric not in knn.METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.correction not in CORRECTIONS:
            raise ConfigError(f"unknown correction mode {self.correction!r}")
        if not 0.0 < self.gamma_init <= 1.0:
            raise ConfigError(f"gamma_init must be in (0, 1], got {self.gamma_init}")
        if not self.gamma_decay_factor > 1.0:
            raise ConfigError(
                f"gamma_decay_factor must be > 1, got {self.gamma_decay_factor}")
        for name in ("selknn_m_init_percent", "selknn_m_increment_percent"):
            value = getattr(self, name)
            if not 0.0 < value <= 100.0:
                raise ConfigError(f"{name} must be in (0, 100], got {value}")
        if self.deep_knn_reference not in (REFERENCE_CORRECTED, REFERENCE_CLEAN_SUBSET):
            raise ConfigError(f"unknown deep_knn_reference {self.deep_knn_reference!r}")
        # delegate scheme/tie/epsilon validation
        self.vote_config()

    def vote_config(self) -> VoteConfig:
        return VoteConfig(self.vote_scheme, self.tie_rule, self.vote_epsilon)

    def to_dict(self) -> dict:
        out = {
            "episodes": self.episodes,
            "epochs_per_episode": self.epochs_per_episode,
            "batch_size": self.batch_size,
            "k": self.k,
            "metric": self.metric,
            "vote_scheme": self.vote_scheme,
            "tie_rule": self.tie_rule,
            "vote_epsilon": self.vote_epsilon,
            "correction": self.correction,
            "gamma_init": self.gamma_init,
            "gamma_decay_factor": self.gamma_decay_factor,
            "selknn_m_init_percent": self.selknn_m_init_percent,
            "selknn_m_increment_percent": self.selknn_m_increment_percent,
            "deep_knn_reference": self.deep_knn_reference,
            "seed": self.seed,
            "classifier": {
                "hidden_sizes": list(self.classifier.hidden_sizes),
                "embedding_layer": self.classifier.embedding_layer,
            },
            "optimizer": {
                "learning_rate": self.optimizer.learning_rate,
                "weight_decay": self.optimizer.weight_decay,
                "beta1": self.optimizer.beta1,
                "beta2": self.optimizer.beta2,
                "eps": self.optimizer.eps,
                "lr_milestones": (None if self.optimizer.lr_milestones is None
                                  else list(self.optimizer.lr_milestones)),
                "lr_decay": self.optimizer.lr_decay,
            },
            "loss": {
                "kind": self.loss.kind,
                "sl_alpha": self.loss.sl_alpha,
                "sl_beta": self.loss.sl_beta,
                "rce_clip": self.loss.rce_clip,
            },
            "noise": None,
        }
        if self.noise is not None:
            out["noise"] = {
                "kind": self.noise.kind,
                "level": self.noise.level,
                "transitions": [f"{s}:{t}" for s, t in sorted(self.noise.transitions.items())],
                "seed": self.noise.seed,
            }
        return out


def _take(section: dict, allowed: dict, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r} in {where}")
    merged = dict(allowed)
    merged.update(section)
    return merged


def config_from_dict(raw: dict) -> PipelineConfig:
    """Build a PipelineConfig from a JSON-compatible dict, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
    defaults = PipelineConfig()
    top = _take(raw, {
        "episodes": defaults.episodes,
        "epochs_per_episode": defaults.epochs_per_episode,
        "batch_size": defaults.batch_size,
        "k": defaults.k,
        "metric": defaults.metric,
        "vote_scheme": defaults.vote_scheme,
        "tie_rule": defaults.tie_rule,
        "vote_epsilon": defaults.vote_epsilon,
        "correction": defaults.correction,
        "gamma_init": defaults.gamma_init,
        "gamma_decay_factor": defaults.gamma_decay_factor,
        "selknn_m_init_percent": defaults.selknn_m_init_percent,
        "selknn_m_increment_percent": defaults.selknn_m_increment_percent,
        "deep_knn_reference": defaults.deep_knn_reference,
        "seed": defaults.seed,
        "classifier": {},
        "optimizer": {},
        "loss": {},
        "noise": None,
    }, "config")

    cls = _take(top["classifier"] or {}, {"hidden_sizes": [64], "embedding_layer": None},
                "classifier")
    opt_defaults = OptimizerParams()
    opt = _take(top["optimizer"] or {}, {
        "learning_rate": opt_defaults.learning_rate,
        "weight_decay": opt_defaults.weight_decay,
        "beta1": opt_defaults.beta1,
        "beta2": opt_defaults.beta2,
        "eps": opt_defaults.eps,
        "lr_milestones": None,
        "lr_decay": opt_defaults.lr_decay,
    }, "optimizer")
    loss_defaults = LossConfig()
    loss = _take(top["loss"] or {}, {
        "kind": loss_defaults.kind,
        "sl_alpha": loss_defaults.sl_alpha,
        "sl_beta": loss_defaults.sl_beta,
        "rce_clip": loss_defaults.rce_clip,
    }, "loss")

    noise_spec = None
    if top["noise"] is not None:
        nz = _take(top["noise"], {"kind": noise_mod.SYMMETRIC, "level": 0.0,
                                  "transitions": None, "seed": 0}, "noise")
        transitions = {}
        if nz["transitions"]:
            transitions = noise_mod.parse_transitions(nz["transitions"])
        try:
            noise_spec = NoiseSpec(nz["kind"], float(nz["level"]), transitions,
                                   int(nz["seed"]))
        except ValueError as exc:
            raise ConfigError(f"noise: {exc}") from exc

    try:
        return PipelineConfig(
            episodes=int(top["episodes"]),
            epochs_per_episode=int(top["epochs_per_episode"]),
            batch_size=int(top["batch_size"]),
            k=int(top["k"]),
            metric=top["metric"],
            vote_scheme=top["vote_scheme"],
            tie_rule=top["tie_rule"],
            vote_epsilon=float(top["vote_epsilon"]),
            correction=top["correction"],
            gamma_init=float(top["gamma_init"]),
            gamma_decay_factor=float(top["gamma_decay_factor"]),
            selknn_m_init_percent=float(top["selknn_m_init_percent"]),
            selknn_m_increment_percent=float(top["selknn_m_increment_percent"]),
            deep_knn_reference=top["deep_knn_reference"],
            seed=int(top["seed"]),
            classifier=ClassifierSpec(tuple(int(h) for h in cls["hidden_sizes"]),
                                      cls["embedding_layer"]),
            optimizer=OptimizerParams(
                learning_rate=float(opt["learning_rate"]),
                weight_decay=float(opt["weight_decay"]),
                beta1=float(opt["beta1"]),
                beta2=float(opt["beta2"]),
                eps=float(opt["eps"]),
                lr_milestones=(None if opt["lr_milestones"] is None
                               else tuple(int(m) for m in opt["lr_milestones"])),
                lr_decay=float(opt["lr_decay"]),
            ),
            loss=LossConfig(kind=loss["kind"], sl_alpha=float(loss["sl_alpha"]),
                            sl_beta=float(loss["sl_beta"]), rce_clip=float(loss["rce_clip"])),
            noise=noise_spec,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class EpisodeReport:
    episode: int
    gamma: float
    m_percent: float
    recovery_rate: float | None
    error_rate: float | None
    train_accuracy: float
    test_accuracy_head: float | None
    test_accuracy_knn: float | None
    labels_changed: int
    wall_seconds: float

    def csv_row(self) -> list:
        # wall_seconds is deliberately absent: report CSVs must be
        # byte-reproducible across identical runs, and timing is not.
        def fmt(v):
            return "" if v is None else repr(v) if isinstance(v, float) else str(v)
        return [fmt(getattr(self, col)) for col in CSV_COLUMNS]

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "gamma": self.gamma,
            "m_percent": self.m_percent,
            "recovery_rate": self.recovery_rate,
            "error_rate": self.error_rate,
            "train_accuracy": self.train_accuracy,
            "test_accuracy_head": self.test_accuracy_head,
            "test_accuracy_knn": self.test_accuracy_knn,
            "labels_changed": self.labels_changed,
            "wall_seconds": self.wall_seconds,
        }


def label_recovery_rate(current_labels, true_labels) -> float:
    """Fraction of all samples whose current label matches the true label."""
    if true_labels is None:
        raise ValueError("true labels are absent; recovery rate undefined")
    current = np.asarray(current_labels)
    true = np.asarray(true_labels)
    if current.shape != true.shape:
        raise ValueError(f"length mismatch: {current.shape} vs {true.shape}")
    return float(np.mean(current == true))


def _derive_seed(root: int, stream: int, index: int = 0) -> int:
    return int(np.random.SeedSequence((root, stream, index)).generate_state(1, np.uint64)[0])


def _apply_noise(config: PipelineConfig, dataset: LabeledDataset) -> LabeledDataset:
    if config.noise is None:
        return dataset
    corrupted = noise_mod.inject(dataset.noisy_labels, dataset.num_classes, config.noise)
    return dataset.with_labels(noisy_labels=corrupted, current_labels=corrupted)


def _per_class_counts(labels: np.ndarray, num_classes: int, m_percent: float) -> np.ndarray:
    sizes = np.bincount(labels.astype(np.int64), minlength=num_classes)
    return np.maximum(np.ceil(sizes * m_percent / 100.0).astype(np.int64), 1)


def _gamma_schedule(config: PipelineConfig, episode: int) -> float:
    gamma = config.gamma_init
    for _ in range(episode - 1):
        gamma /= config.gamma_decay_factor
    return gamma


def _m_schedule(config: PipelineConfig, episode: int) -> float:
    return min(config.selknn_m_init_percent
               + config.selknn_m_increment_percent * (episode - 1), 100.0)


def _train_on(config: PipelineConfig, dataset: LabeledDataset, labels: np.ndarray,
              gamma: float, episode_index: int, stream: int = _TRAIN,
              epoch_callback=None) -> tuple[Classifier, trainer.LossLedger]:
    """Fresh model trained on the dataset with the given current labels."""
    sizes = config.classifier.layer_sizes(dataset.d, dataset.num_classes)
    model = init_classifier(sizes, _derive_seed(config.seed, _INIT, episode_index),
                            config.classifier.embedding_layer)
    episode_ds = LabeledDataset(dataset.embeddings, dataset.noisy_labels, labels,
                                None, dataset.num_classes)
    return train_episode(model, episode_ds, gamma, config.epochs_per_episode,
                         config.batch_size, config.optimizer, config.loss,
                         seed=_derive_seed(config.seed, stream, episode_index),
                         epoch_callback=epoch_callback)


def _correct(config: PipelineConfig, embeddings: EmbeddingSet, labels: np.ndarray,
             num_classes: int, ledger: trainer.LossLedger,
             m_percent: float) -> tuple[np.ndarray, np.ndarray | None]:
    vote = config.vote_config()
    n = embeddings.n
    if config.correction == SELKNN and m_percent < 100.0:
        counts = _per_class_counts(labels, num_classes, m_percent)
        sizes = np.bincount(labels.astype(np.int64), minlength=num_classes)
        reference_size = int(np.minimum(counts, sizes).sum())
        k = clamp_k(config.k, reference_size, "selknn reference set")
        return correct_selknn(embeddings, labels, num_classes, ledger.cumulative,
                              counts, k, config.metric, vote)
    k = clamp_k(config.k, n - 1, "dataset minus self")
    return correct_iterknn(embeddings, labels, num_classes, k, config.metric, vote), None


def _test_metrics(config: PipelineConfig, model: Classifier, train_emb: EmbeddingSet,
                  reference_labels: np.ndarray, num_classes: int,
                  mask: np.ndarray | None,
                  test: LabeledDataset | None) -> tuple[float | None, float | None]:
    if test is None or test.true_labels is None:
        return None, None
    head = head_accuracy(model, test.embeddings.data, test.true_labels)
    test_emb = embed_all(model, test.embeddings)
    ref_emb, ref_labels = train_emb, reference_labels
    if config.deep_knn_reference == REFERENCE_CLEAN_SUBSET and mask is not None:
        keep = np.flatnonzero(mask)
        ref_emb = EmbeddingSet(train_emb.data[keep])
        ref_labels = reference_labels[keep]
    k = clamp_k(config.k, ref_emb.n, "deep-knn reference")
    predicted = predict_deep_knn(ref_emb, ref_labels, test_emb, k, config.metric,
                                 config.vote_config(), num_classes)
    return head, float(np.mean(predicted == test.true_labels))


def run(config: PipelineConfig, train: LabeledDataset,
        test: LabeledDataset | None = None, report_dir=None
        ) -> tuple[list[EpisodeReport], LabeledDataset, Classifier]:
    """Full multi-episode correction run.

    Current labels start at the noisy labels; every episode retrains from
    scratch, corrects, then decays the blend weight and raises the reference
    percentage. A final training pass fits the corrected labels alone.
    Ground-truth labels are touched only by metric computation.
    """
    ds = _apply_noise(config, train)
    y_hat = ds.noisy_labels.copy()
    reports: list[EpisodeReport] = []
    csv_file = writer = None
    if report_dir is not None:
        report_dir = Path(report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        csv_file = open(report_dir / "episodes.csv", "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(CSV_COLUMNS)
        csv_file.flush()

    try:
        for episode in range(1, config.episodes + 1):
            t0 = time.perf_counter()
            gamma = _gamma_schedule(config, episode)
            m_percent = _m_schedule(config, episode)
            model, ledger = _train_on(config, ds, y_hat, gamma, episode)
            train_acc = head_accuracy(model, ds.embeddings.data, y_hat)
            emb = embed_all(model, ds.embeddings)
            new_labels, mask = _correct(config, emb, y_hat, ds.num_classes, ledger,
                                        m_percent)
            changed = int(np.sum(new_labels != y_hat))
            y_hat = new_labels

            recovery = error = None
            if ds.true_labels is not None:
                recovery = label_recovery_rate(y_hat, ds.true_labels)
                error = noise_mod.label_error_rate(y_hat, ds.true_labels)
            head, deep = _test_metrics(config, model, emb, y_hat, ds.num_classes,
                                       mask, test)

            report = EpisodeReport(episode, gamma, m_percent, recovery, error,
                                   train_acc, head, deep, changed,
                                   time.perf_counter() - t0)
            reports.append(report)
            if writer is not None:
                writer.writerow(report.csv_row())
                csv_file.flush()
            logger.info(
                "episode %d/%d: gamma=%.4f m=%.0f%% changed=%d%s", episode,
                config.episodes, gamma, m_percent, changed,
                "" if recovery is None else f" recovery={recovery:.4f}")
    finally:
        if csv_file is not None:
            csv_file.close()

    # Final pass: train on the corrected labels alone.
    t0 = time.perf_counter()
    final_model, final_ledger = _train_on(config, ds, y_hat, 0.0, config.episodes + 1,
                                          stream=_FINAL)
    final_mask = None
    if config.deep_knn_reference == REFERENCE_CLEAN_SUBSET:
        counts = _per_class_counts(y_hat, ds.num_classes, _m_schedule(config, config.episodes))
        final_mask = knn.low_loss_reference_mask(y_hat, ds.num_classes,
                                                 final_ledger.cumulative, counts)
    final_emb = embed_all(final_model, ds.embeddings)
    final_head, final_deep = _test_metrics(config, final_model, final_emb, y_hat,
                                           ds.num_classes, final_mask, test)
    final = {
        "train_accuracy": head_accuracy(final_model, ds.embeddings.data, y_hat),
        "test_accuracy_head": final_head,
        "test_accuracy_knn": final_deep,
        "recovery_rate": (None if ds.true_labels is None
                          else label_recovery_rate(y_hat, ds.true_labels)),
        "error_rate": (None if ds.true_labels is None
                       else noise_mod.label_error_rate(y_hat, ds.true_labels)),
        "wall_seconds": time.perf_counter() - t0,
    }

    corrected = ds.with_labels(current_labels=y_hat)
    if report_dir is not None:
        summary = {
            "config": config.to_dict(),
            "episodes": [r.to_dict() for r in reports],
            "final": final,
        }
        (Path(report_dir) / "summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return reports, corrected, final_model


def train_reference_model(config: PipelineConfig, dataset: LabeledDataset) -> Classifier:
    """Fresh model fitted to the dataset's current labels (blend weight 0)."""
    model, _ = _train_on(config, dataset, dataset.current_labels, 0.0, 0, stream=_FINAL)
    return model


def evaluate(model: Classifier, reference: LabeledDataset, test: LabeledDataset,
             config: PipelineConfig) -> tuple[float, float]:
    """Head accuracy and deep-KNN accuracy of a model on a labeled test set."""
    if test.true_labels is None:
        raise ValueError("test set has no true labels")
    head = head_accuracy(model, test.embeddings.data, test.true_labels)
    ref_emb = embed_all(model, reference.embeddings)
    test_emb = embed_all(model, test.embeddings)
    k = clamp_k(config.k, ref_emb.n, "deep-knn reference")
    predicted = predict_deep_knn(ref_emb, reference.current_labels, test_emb, k,
                                 config.metric, config.vote_config(),
                                 reference.num_classes)
    return head, float(np.mean(predicted == test.true_labels))


def k_sweep(config: PipelineConfig, dataset: LabeledDataset, k_values,
            eval_every: int | None = None) -> list[dict]:
    """Single-episode recovery rates for each k under both correction modes.

    Trains one episode on the noisy labels, then corrects once per
    (k, mode) pair — at the final epoch by default, or every `eval_every`
    epochs. Rows: {"epoch", "k", "mode", "recovery_rate"}.
    """
    ks: list[int] = []
    for k in k_values:
        if k in ks:
            logger.warning("duplicate k value %d ignored", k)
        else:
            ks.append(int(k))
    if not ks:
        raise ValueError("no k values given")

    ds = _apply_noise(config, dataset)
    if ds.true_labels is None:
        raise ValueError("k_sweep requires true labels")
    if max(ks) >= ds.n:
        raise ValueError(f"k {max(ks)} >= dataset size {ds.n}")

    noisy = ds.noisy_labels
    counts = _per_class_counts(noisy, ds.num_classes, config.selknn_m_init_percent)
    sizes = np.bincount(noisy.astype(np.int64), minlength=ds.num_classes)
    reference_size = int(np.minimum(counts, sizes).sum())
    epochs = config.epochs_per_episode
    rows: list[dict] = []

    def checkpoint(model, epoch_index, ledger):
        done = epoch_index + 1
        if eval_every is None:
            if done != epochs:
                return
        elif done % eval_every and done != epochs:
            return
        emb = embed_all(model, ds.embeddings)
        for k in ks:
            corrected = correct_iterknn(emb, noisy, ds.num_classes,
                                        clamp_k(k, ds.n - 1, "dataset minus self"),
                                        config.metric, config.vote_config())
            rows.append({"epoch": done, "k": k, "mode": ITERKNN,
                         "recovery_rate": label_recovery_rate(corrected, ds.true_labels)})
            corrected, _ = correct_selknn(
                emb, noisy, ds.num_classes, ledger, counts,
                clamp_k(k, reference_size, "selknn reference set"),
                config.metric, config.vote_config())
            rows.append({"epoch": done, "k": k, "mode": SELKNN,
                         "recovery_rate": label_recovery_rate(corrected, ds.true_labels)})

    _train_on(config, ds, noisy, config.gamma_init, 1, epoch_callback=checkpoint)
    return rows
