"""Iterative KNN label cleanup for dense embedding datasets.

Submodules load lazily so the CLI can apply its thread-count override before
numpy initializes its BLAS pool.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "DataFormatError": "data", "EmbeddingSet": "data", "LabeledDataset": "data",
    "load_dataset": "data", "normalize_rows": "data", "save_dataset": "data",
    "synth_gaussian": "data",
    "Neighbor": "knn", "VoteConfig": "knn", "correct_iterknn": "knn",
    "correct_selknn": "knn", "distance": "knn", "knn_query": "knn",
    "predict_deep_knn": "knn", "vote_hard": "knn", "vote_soft": "knn",
    "vote_weighted": "knn",
    "NoiseSpec": "noise", "builtin_transitions": "noise",
    "inject_asymmetric": "noise", "inject_symmetric": "noise",
    "label_error_rate": "noise",
    "ConfigError": "pipeline", "EpisodeReport": "pipeline",
    "PipelineConfig": "pipeline", "config_from_dict": "pipeline",
    "evaluate": "pipeline", "k_sweep": "pipeline",
    "label_recovery_rate": "pipeline", "run": "pipeline",
    "Classifier": "trainer", "LossConfig": "trainer", "LossLedger": "trainer",
    "NumericError": "trainer", "OptimizerParams": "trainer", "embed_all": "trainer",
    "forward": "trainer", "gradient_check": "trainer", "hybrid_loss": "trainer",
    "init_classifier": "trainer", "loss_ce": "trainer", "loss_rce": "trainer",
    "loss_sl": "trainer", "train_episode": "trainer",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name: str):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(import_module(f".{module}", __name__), name)
