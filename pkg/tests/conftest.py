#!/usr/bin/env python

import numpy as np
import pytest

from cdsl.DataGenerator import Sample, DatasetSplit, generate_two_domain, build_split
from cdsl.Encoder import DenseLayer, EncoderModel
from cdsl.numerics import l2_normalize
from cdsl.utils import SOURCE, TARGET


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def unit_rows():
    """random unit-norm rows: unit_rows(rng, n, d)"""
    def _unit_rows(rng, n_rows, dim):
        return l2_normalize(rng.standard_normal((n_rows, dim)))
    return _unit_rows


@pytest.fixture
def small_split():
    """3 classes x 8 samples per domain, one label per class"""
    source, target = generate_two_domain(num_classes=3, per_class_count=8, seed=7)
    return build_split(source, target, shots_per_class=1, seed=7)


@pytest.fixture
def five_shot_split():
    source, target = generate_two_domain(num_classes=3, per_class_count=10, cluster_sigma=0.3, seed=11)
    return build_split(source, target, shots_per_class=5, seed=11)


@pytest.fixture
def identity_encoder():
    """a single linear 2 -> 2 layer with W = I: features are the normalized inputs"""
    return EncoderModel([DenseLayer(np.eye(2), np.zeros(2), activation="identity")])


def unlabeled_split(source_x, target_x):
    """a DatasetSplit holding only unlabeled inputs"""
    return DatasetSplit(
        [],
        [Sample(np.asarray(x_, dtype=float), None, SOURCE, go_i) for go_i, x_ in enumerate(source_x)],
        [Sample(np.asarray(x_, dtype=float), None, TARGET, go_i) for go_i, x_ in enumerate(target_x)],
        num_classes=1,
        require_all_classes=False)


@pytest.fixture
def make_unlabeled_split():
    return unlabeled_split
