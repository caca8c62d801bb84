"""Shared fixtures: deterministic corpora and cached trained checkpoints.

Checkpoints are trained once per configuration and cached on disk (training is
seeded, so a cache hit is byte-identical to retraining). Set
MIMICPROJ_TEST_CACHE to relocate the cache; delete it to force retraining.
"""

import hashlib
import json
import os
from pathlib import Path

import pytest

from mimicproj.data_io import SplitSpec, generate_synthetic, make_split
from mimicproj.generator_zoo import (ClassifierConfig, GanConfig, load_gan_checkpoint,
                                     load_classifier_checkpoint, save_gan_checkpoint,
                                     save_classifier_checkpoint, train_classifier,
                                     train_gan)

CACHE_VERSION = "v1"  # bump to invalidate cached checkpoints after model changes


def cache_dir() -> Path:
    d = Path(os.environ.get("MIMICPROJ_TEST_CACHE",
                            Path(__file__).parent / ".cache")) / CACHE_VERSION
    d.mkdir(parents=True, exist_ok=True)
    return d


def _key(tag: str, payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return f"{tag}-{hashlib.sha256(blob).hexdigest()[:12]}"


def cached_gan(corpus_kw: dict, split: SplitSpec, gan_cfg: GanConfig):
    key = _key("gan", {"corpus": corpus_kw, "split": vars(split).copy(),
                       "gan": vars(gan_cfg).copy()})
    path = cache_dir() / f"{key}.ckpt"
    if path.exists():
        return load_gan_checkpoint(path)
    ds = generate_synthetic(**corpus_kw)
    train, _ = make_split(ds, split)
    ckpt = train_gan(train, gan_cfg)
    save_gan_checkpoint(ckpt, path)
    return ckpt


def cached_classifier(corpus_kw: dict, clf_cfg: ClassifierConfig):
    key = _key("clf", {"corpus": corpus_kw, "clf": vars(clf_cfg).copy()})
    path = cache_dir() / f"{key}.ckpt"
    if path.exists():
        return load_classifier_checkpoint(path)
    ds = generate_synthetic(**corpus_kw)
    train, test = make_split(ds, SplitSpec(0.9, seed=0))
    clf = train_classifier(train, clf_cfg, test=test)
    save_classifier_checkpoint(clf, path)
    return clf


# Desk-scale corpora --------------------------------------------------------

CORPUS28 = dict(n_per_class=200, resolution=(28, 28), seed=1)
CORPUS16 = dict(n_per_class=200, resolution=(16, 16), seed=1)
MINI16 = dict(n_per_class=60, resolution=(16, 16), seed=2)


@pytest.fixture(scope="session")
def corpus28():
    return generate_synthetic(**CORPUS28)


@pytest.fixture(scope="session")
def corpus16():
    return generate_synthetic(**CORPUS16)


@pytest.fixture(scope="session")
def split28(corpus28):
    return make_split(corpus28, SplitSpec(0.9, seed=0))


@pytest.fixture(scope="session")
def gan28(split28):
    """Main 28x28 generator used by the trend experiments."""
    return cached_gan(CORPUS28, SplitSpec(0.9, seed=0),
                      GanConfig(latent_dim=64, epochs=20, seed=0))


@pytest.fixture(scope="session")
def gan16(corpus16):
    """16x16 source-domain generator (domain adaptation)."""
    return cached_gan(CORPUS16, SplitSpec(0.9, seed=0),
                      GanConfig(latent_dim=64, epochs=20, seed=0))


@pytest.fixture(scope="session")
def mini_gan16():
    """Tiny, fast generator for functional (non-trend) tests."""
    return cached_gan(MINI16, SplitSpec(0.9, seed=0),
                      GanConfig(latent_dim=32, ngf=16, ndf=16, epochs=4, seed=0))


@pytest.fixture(scope="session")
def classifier28():
    return cached_classifier(CORPUS28, ClassifierConfig(epochs=3, seed=0))
