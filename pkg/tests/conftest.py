"""Shared fixtures: a small synthetic corpus and a detector trained on it.

Both are session-scoped because corpus synthesis and training are the
expensive parts of the suite; everything downstream treats them as
read-only.
"""

from __future__ import annotations

import pytest

from chunksmooth import corpus, smoothing
from chunksmooth.ablation import AblationConfig
from chunksmooth.smoothing import DetectorSpec, TrainConfig


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """120 synthetic files: big enough to train against, small enough to
    regenerate on every pytest run."""
    out = tmp_path_factory.mktemp("corpus120")
    cfg = corpus.SynthConfig(n_files=120, size_range=(6144, 16384), seed=11)
    manifest, records = corpus.synth_corpus(cfg, out)
    return manifest, records, out


@pytest.fixture(scope="session")
def small_splits(small_corpus):
    manifest, _, _ = small_corpus
    return corpus.temporal_split(manifest)


@pytest.fixture(scope="session")
def clean_corpus(tmp_path_factory):
    """Noise-free corpus: every malicious body row carries a verbatim motif,
    which the motif-presence tests rely on."""
    out = tmp_path_factory.mktemp("corpus_clean")
    cfg = corpus.SynthConfig(
        n_files=40, size_range=(6144, 12288), body_noise_range=(0.0, 0.0), seed=5
    )
    manifest, records = corpus.synth_corpus(cfg, out)
    return manifest, records, out


@pytest.fixture(scope="session")
def desk_model(small_splits):
    """Converged sca detector (p=0.05, 100 views) on the small corpus.

    The epoch budget looks generous but the corpus is tiny: validation
    accuracy saturates around epoch 35 and the plateau rule keeps
    training to the cap, a few seconds total.
    """
    train_m, val_m, _ = small_splits
    spec = DetectorSpec(kind="sca", ablation=AblationConfig(scheme="sca", p=0.05, n_views=100))
    cfg = TrainConfig(max_epochs=60, patience=10, seed=0)
    params, history = smoothing.train_smoothed(train_m, val_m, spec, cfg)
    best = history.val_accuracies[history.best_epoch - 1]
    assert best >= 0.9, f"fixture model underfit: val acc {best}"
    return params, spec, history
