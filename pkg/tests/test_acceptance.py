"""End-to-end acceptance suite.

Each test is one exit criterion at its stated tolerance; the terminal summary
prints one [PASS]/[FAIL] line per criterion (see conftest).
"""

import hashlib
import json
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from knnclean.cli import main
from knnclean.data import EmbeddingSet, save_dataset, synth_gaussian
from knnclean.knn import (LOWEST_CLASS_ID, NEAREST_NEIGHBOR_WINS, Neighbor,
                          VoteConfig, knn_query, vote_hard)
from knnclean.noise import inject_symmetric
from knnclean.pipeline import (ClassifierSpec, PipelineConfig, k_sweep,
                               label_recovery_rate, run)
from knnclean.trainer import LossConfig, gradient_check, init_classifier

SYNTH_SEED = 1101
NOISE_SEED = 2202


@pytest.fixture(scope="module")
def noisy_synthetic():
    """synth(C=10, per_class=1000, d=32, sep=8) with 60% symmetric noise."""
    base = synth_gaussian(10, 1000, 32, 8.0, seed=SYNTH_SEED)
    noisy = inject_symmetric(base.true_labels, 10, 0.6, seed=NOISE_SEED)
    return base.with_labels(noisy_labels=noisy, current_labels=noisy)


def test_voting_oracle():
    """vote_hard matches exhaustive enumeration: 3^3 label triples, k=3, C=3,
    both tie rules; < 1 s."""

    def oracle(labels, distances, tie_rule):
        counts = [labels.count(c) for c in range(3)]
        top = max(counts)
        tied = [c for c in range(3) if counts[c] == top]
        if tie_rule == NEAREST_NEIGHBOR_WINS:
            nearest = labels[int(np.argmin(distances))]
            if nearest in tied:
                return nearest
        return tied[0]

    start = time.perf_counter()
    distances = [0.2, 0.4, 0.6]
    for tie_rule in (NEAREST_NEIGHBOR_WINS, LOWEST_CLASS_ID):
        config = VoteConfig(tie_rule=tie_rule)
        for a in range(3):
            for b in range(3):
                for c in range(3):
                    labels = [a, b, c]
                    nbrs = [Neighbor(i, d) for i, d in enumerate(distances)]
                    got = vote_hard(nbrs, np.array(labels), config)
                    assert got == oracle(labels, distances, tie_rule), (labels, tie_rule)
    assert time.perf_counter() - start < 1.0


def test_knn_exactness():
    """knn_query equals full-sort brute force on 100 random instances
    (n <= 500, d <= 32, k <= 50) including duplicated-point ties; < 10 s."""
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    for trial in range(100):
        n = int(rng.integers(2, 501))
        d = int(rng.integers(1, 33))
        k = int(rng.integers(1, min(n, 50) + 1))
        data = rng.standard_normal((n, d))
        if trial % 3 == 0:  # force exact ties with duplicated points
            dup = rng.integers(0, n, size=max(1, n // 5))
            data[rng.integers(0, n, size=dup.size)] = data[dup]
        query = data[int(rng.integers(0, n))] if trial % 2 else rng.standard_normal(d)

        got = knn_query(EmbeddingSet(data), query, k)

        dist = np.sqrt(np.sum((data - query) ** 2, axis=1))  # direct per-pair oracle
        order = np.lexsort((np.arange(n), dist))[:k]
        assert [nb.index for nb in got] == order.tolist(), f"trial {trial}"
        assert np.allclose([nb.distance for nb in got], dist[order], atol=1e-9)
    assert time.perf_counter() - start < 10.0


def test_gradient_correctness():
    """Analytic vs central finite-difference gradients < 1e-4 relative for
    ce, rce(clip=-4), sl(alpha=beta=1), and the gamma=0.5 blend, over 50
    random small models; < 30 s."""
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    configs = [
        ("ce", LossConfig(kind="ce"), False),
        ("rce", LossConfig(kind="sl", sl_alpha=0.0, sl_beta=1.0, rce_clip=-4.0), False),
        ("sl", LossConfig(kind="sl", sl_alpha=1.0, sl_beta=1.0), False),
        ("hybrid", LossConfig(kind="sl"), True),
    ]
    for trial in range(50):
        sizes = (int(rng.integers(3, 8)), int(rng.integers(4, 10)), int(rng.integers(2, 6)))
        model = init_classifier(sizes, seed=int(rng.integers(0, 2**31)))
        x = rng.standard_normal(sizes[0])
        label = int(rng.integers(0, sizes[-1]))
        other = int((label + 1 + rng.integers(0, sizes[-1] - 1)) % sizes[-1])
        for name, config, blended in configs:
            if blended:
                err = gradient_check(model, x, label, config,
                                     noisy_label=other, gamma=0.5)
            else:
                err = gradient_check(model, x, label, config)
            assert err < 1e-4, f"trial {trial} loss {name}: rel err {err}"
    assert time.perf_counter() - start < 30.0


@pytest.mark.parametrize("level", [0.2, 0.6, 0.8])
def test_noise_model_statistics(level):
    """Symmetric injection at n=1e5, C=10: measured error within +/-0.005 of
    the level; flipped-target uniformity chi-square p > 0.001."""
    n, num_classes = 100_000, 10
    labels = (np.arange(n) % num_classes).astype(np.uint32)
    out = inject_symmetric(labels, num_classes, level, seed=int(level * 1000))
    flipped = out != labels
    assert abs(flipped.mean() - level) <= 0.005
    ranks = out[flipped].astype(np.int64) - (out[flipped] > labels[flipped])
    counts = np.bincount(ranks, minlength=num_classes - 1)
    assert chisquare(counts).pvalue > 0.001


def test_synthetic_end_to_end_recovery(noisy_synthetic):
    """Desk-scale recovery analogue: selknn (k=100, 3 episodes, 30 epochs,
    m 20/30/40, gamma 1.0 divided by 1.2) reaches final recovery >= 0.98 with
    episode-1 recovery >= 0.90; iterknn reaches >= 0.95; < 5 min."""
    start = time.perf_counter()
    sel_cfg = PipelineConfig(episodes=3, epochs_per_episode=30, k=100,
                             correction="selknn", seed=7)
    sel_reports, _, _ = run(sel_cfg, noisy_synthetic)
    assert sel_reports[0].recovery_rate >= 0.90
    assert sel_reports[-1].recovery_rate >= 0.98
    assert [r.m_percent for r in sel_reports] == [20.0, 30.0, 40.0]

    iter_cfg = PipelineConfig(episodes=3, epochs_per_episode=30, k=100,
                              correction="iterknn", seed=7)
    iter_reports, _, _ = run(iter_cfg, noisy_synthetic)
    assert iter_reports[-1].recovery_rate >= 0.95
    assert time.perf_counter() - start < 300.0


def test_schedule_conformance():
    """Over 10 episodes the emitted gamma values equal 1/1.2^(m-1) within
    1e-12 and m-percent values equal min(20 + 10(m-1), 100) exactly."""
    base = synth_gaussian(3, 20, 6, 8.0, seed=3)
    noisy = inject_symmetric(base.true_labels, 3, 0.3, seed=4)
    ds = base.with_labels(noisy_labels=noisy, current_labels=noisy)
    cfg = PipelineConfig(episodes=10, epochs_per_episode=1, k=5,
                         classifier=ClassifierSpec(hidden_sizes=(8,)), seed=1)
    reports, _, _ = run(cfg, ds)
    for m, report in enumerate(reports, start=1):
        assert abs(report.gamma - 1.0 / 1.2 ** (m - 1)) <= 1e-12
        assert report.m_percent == min(20.0 + 10.0 * (m - 1), 100.0)


def test_blindness_to_ground_truth():
    """Scrambling true_labels changes no corrected label bit."""
    base = synth_gaussian(4, 50, 8, 8.0, seed=11)
    noisy = inject_symmetric(base.true_labels, 4, 0.4, seed=12)
    ds = base.with_labels(noisy_labels=noisy, current_labels=noisy)
    scrambled = ds.with_labels(
        true_labels=np.random.default_rng(0).permutation(np.asarray(ds.true_labels)))
    cfg = PipelineConfig(episodes=2, epochs_per_episode=5, k=10,
                         classifier=ClassifierSpec(hidden_sizes=(16,)), seed=5)
    _, corrected_a, _ = run(cfg, ds)
    _, corrected_b, _ = run(cfg, scrambled)
    assert np.array_equal(corrected_a.current_labels, corrected_b.current_labels)


def test_run_determinism_csv(tmp_path):
    """Two identical CLI run invocations produce byte-identical report CSVs."""
    base = synth_gaussian(3, 40, 8, 8.0, seed=21)
    noisy = inject_symmetric(base.true_labels, 3, 0.4, seed=22)
    ds = base.with_labels(noisy_labels=noisy, current_labels=noisy)
    train_path = tmp_path / "train.emb1"
    save_dataset(ds, train_path)
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "episodes": 2, "epochs_per_episode": 4, "k": 10, "seed": 9,
        "classifier": {"hidden_sizes": [16]},
    }))
    digests = []
    for sub in ("run1", "run2"):
        report_dir = tmp_path / sub
        code = main(["run", "--config", str(config_path), "--train",
                     str(train_path), "--report-dir", str(report_dir)])
        assert code == 0
        digests.append(hashlib.sha256(
            (report_dir / "episodes.csv").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_k_sweep_shape(noisy_synthetic):
    """On the 60%-noise synthetic setup: selknn recovery range across
    k in {5, 20, 50, 100, 200} is < 2 points; iterknn at k=5 trails iterknn
    at k=100 by >= 1 point."""
    cfg = PipelineConfig(episodes=1, epochs_per_episode=30, seed=7)
    rows = k_sweep(cfg, noisy_synthetic, [5, 20, 50, 100, 200])
    sel = {r["k"]: r["recovery_rate"] for r in rows if r["mode"] == "selknn"}
    iter_ = {r["k"]: r["recovery_rate"] for r in rows if r["mode"] == "iterknn"}
    assert max(sel.values()) - min(sel.values()) < 0.02
    assert iter_[100] - iter_[5] >= 0.01
