#!/usr/bin/env python

import math

import numpy as np
import pytest
from scipy.stats import ortho_group

from cdsl.Encoder import EncoderModel
from cdsl.FeatureEval import ProbeConfig, EvalConfig, nearest_neighbors, weighted_knn, accuracy, linear_probe, \
    retrieval_precision, retrieval_table, confusion_loss, sealed_labels, evaluate_model, evaluate_raw, \
    evaluate_split_features
from cdsl.numerics import l2_normalize
from cdsl.utils import TARGET, EmptyReference, InvalidConfig


def brute_force_knn(reference_feats, reference_labels, query_feats, k, tau_knn, num_classes):
    sims = query_feats @ reference_feats.T
    predictions = []
    for go_q in range(len(query_feats)):
        ranked = sorted(range(len(reference_feats)), key=lambda i_: (-sims[go_q, i_], i_))[:k]
        scores = [0.] * num_classes
        for i_ in ranked:
            scores[reference_labels[i_]] += np.exp(sims[go_q, i_] / tau_knn)
        best = 0
        for label in range(1, num_classes):
            if scores[label] > scores[best]:
                best = label
        predictions.append(best)
    return predictions


def test_knn_examples(rng, unit_rows):
    reference = unit_rows(rng, 10, 4)
    labels = rng.integers(3, size=10)
    assert weighted_knn(reference, labels, reference[[6]], k=1)[0] == labels[6]
    same = np.full(10, 2)
    assert np.all(weighted_knn(reference, same, unit_rows(rng, 5, 4), k=4, num_classes=3) == 2)


def test_knn_matches_brute_force(rng, unit_rows):
    for _ in range(100):
        n_reference = int(rng.integers(1, 51))
        num_classes = int(rng.integers(2, 6))
        k = int(rng.integers(1, 11))
        reference = unit_rows(rng, n_reference, 5)
        labels = rng.integers(num_classes, size=n_reference)
        queries = unit_rows(rng, 7, 5)
        predictions = weighted_knn(reference, labels, queries, k=k, tau_knn=0.05, num_classes=num_classes)
        assert predictions.tolist() == brute_force_knn(reference, labels, queries, k, 0.05, num_classes)


def test_knn_ties_go_to_the_lowest_class():
    reference = np.array([[1., 0.], [0., 1.]])
    assert weighted_knn(reference, [1, 0], [[math.sqrt(0.5), math.sqrt(0.5)]], k=2)[0] == 0
    ids, _ = nearest_neighbors(np.array([[1., 0.], [1., 0.], [0., 1.]]), np.array([[1., 0.]]), 3)
    assert ids.tolist() == [[0, 1, 2]]


def test_knn_errors(rng, unit_rows):
    with pytest.raises(EmptyReference):
        weighted_knn(np.zeros((0, 3)), [], unit_rows(rng, 2, 3))
    with pytest.raises(InvalidConfig):
        weighted_knn(unit_rows(rng, 2, 3), [0, 1], unit_rows(rng, 2, 3), k=0)
    assert accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2. / 3.)
    assert accuracy([], []) == 0.


def test_linear_probe_separable_and_uninformative(rng):
    positive = l2_normalize(np.array([1., 0.]) + 0.1 * rng.standard_normal((20, 2)))
    negative = l2_normalize(np.array([-1., 0.]) + 0.1 * rng.standard_normal((20, 2)))
    feats = np.vstack([positive, negative])
    labels = np.array([0] * 20 + [1] * 20)
    assert linear_probe(feats[::2], labels[::2], feats[1::2], labels[1::2]) == 1.

    constant = np.tile([0.6, 0.8], (40, 1))
    assert linear_probe(constant, labels, constant, labels) == pytest.approx(0.5)
    first = linear_probe(feats[::2], labels[::2], feats[1::2], labels[1::2], ProbeConfig(max_iter=50, seed=4))
    second = linear_probe(feats[::2], labels[::2], feats[1::2], labels[1::2], ProbeConfig(max_iter=50, seed=4))
    assert first == second


def test_retrieval_by_hand():
    reference = np.array([[1., 0.], [0., 1.], [-1., 0.]])
    reference_labels = np.array([0, 1, 0])
    angle = math.radians(10.)
    queries = np.array([[math.cos(angle), math.sin(angle)], [0., -1.], [-math.cos(angle), math.sin(angle)]])
    query_labels = np.array([0, 1, 0])
    assert retrieval_precision(reference, reference_labels, queries, query_labels, k=2) == pytest.approx(2. / 6.)
    table = retrieval_table(reference, reference_labels, queries, query_labels, k=2)
    assert [row[:3] for row in table] == [[0, 1, 0], [0, 2, 1], [1, 1, 0], [1, 2, 2], [2, 1, 2], [2, 2, 1]]
    assert [row[4] for row in table] == [1, 0, 0, 0, 1, 0]


def test_retrieval_identity_and_rotation(rng, unit_rows):
    feats = unit_rows(rng, 30, 6)
    labels = rng.integers(4, size=30)
    assert retrieval_precision(feats, labels, feats, labels, k=1) == 1.
    queries = unit_rows(rng, 15, 6)
    query_labels = rng.integers(4, size=15)
    rotation = ortho_group.rvs(6, random_state=3)
    assert retrieval_precision(feats @ rotation.T, labels, queries @ rotation.T, query_labels, k=5) == \
        pytest.approx(retrieval_precision(feats, labels, queries, query_labels, k=5))


def test_confusion_loss(rng, unit_rows):
    feats = unit_rows(rng, 100, 3)
    identical = confusion_loss(feats, feats.copy(), seed=1)
    assert identical == pytest.approx(math.log(2.), abs=0.05)
    assert identical <= math.log(2.)

    source = l2_normalize(np.array([1., 0., 0.]) + 0.1 * rng.standard_normal((60, 3)))
    target = l2_normalize(np.array([-1., 0., 0.]) + 0.1 * rng.standard_normal((60, 3)))
    separated = confusion_loss(source, target, seed=1)
    assert 0. <= separated < 0.1
    assert confusion_loss(source, target, seed=1) == separated
    with pytest.raises(EmptyReference):
        confusion_loss(np.zeros((0, 3)), target)


def test_evaluate_model_report(small_split):
    model = EncoderModel.initialize(2, (16,), 4, seed=2)
    config = EvalConfig(k=5, probe=ProbeConfig(max_iter=300), dump_retrieval=True)
    report, dump = evaluate_model(model, small_split, config)
    for rate in (report.knn_accuracy, report.linear_accuracy, report.retrieval_precision_at_k):
        assert 0. <= rate <= 1.
    assert 0. <= report.confusion_loss <= math.log(2.)
    assert (report.n_reference, report.n_query, report.reference) == (3, 24, "labeled")
    assert len(dump) == 24 * 3
    assert set(report.to_dict()) >= {"knn_accuracy", "linear_accuracy", "retrieval_precision_at_k",
                                     "confusion_loss", "k", "tau_knn", "seeds"}
    again, _ = evaluate_model(model, small_split, config)
    assert again == report


def test_reference_sets_and_raw_features(small_split):
    config = EvalConfig(k=5, reference="all_source", probe=ProbeConfig(max_iter=300))
    report, dump = evaluate_raw(small_split, config)
    assert report.n_reference == 24 and dump is None
    source_feats = l2_normalize(small_split.source_inputs())
    target_feats = l2_normalize(small_split.target_inputs())
    assert evaluate_split_features(small_split, source_feats, target_feats, config)[0] == report
    with pytest.raises(InvalidConfig):
        EvalConfig(reference="everything").validate()


def test_unlabeled_split_cannot_be_scored(small_split):
    assert sealed_labels(small_split, TARGET).shape == (24,)
    with pytest.raises(EmptyReference):
        sealed_labels(small_split.without_labels(), TARGET)
