#!/usr/bin/env python

"""
Feature-quality measurements on frozen features: weighted kNN transfer accuracy, a linear probe,
cross-domain retrieval precision and a domain-confusion score.

This is the only module that opens the sealed ground-truth labels of a DatasetSplit.
"""
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.special import log_softmax

from cdsl.numerics import as_vector, l2_normalize
from cdsl.utils import SOURCE, TARGET, InvalidConfig, EmptyReference, DimensionMismatch


REFERENCE_SETS = ("labeled", "all_source")
RETRIEVAL_HEADER = ["query_index", "rank", "neighbor_index", "similarity", "match"]


@dataclass
class ProbeConfig:
    lr: float = 0.5
    max_iter: int = 5000
    tol: float = 1e-7
    seed: int = 12345

    def validate(self):
        if not self.lr > 0:
            raise InvalidConfig(f"probe.lr must be positive, got {self.lr}")
        if self.max_iter < 1:
            raise InvalidConfig(f"probe.max_iter must be >= 1, got {self.max_iter}")
        if self.tol < 0:
            raise InvalidConfig(f"probe.tol must be non-negative, got {self.tol}")
        return self


@dataclass
class EvalConfig:
    k: int = 20
    tau_knn: float = 0.05
    retrieval_k: int = 5
    reference: str = "labeled"
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    confusion_holdout: float = 0.2
    seed: int = 12345
    dump_retrieval: bool = False

    def validate(self):
        if self.k < 1 or self.retrieval_k < 1:
            raise InvalidConfig(f"eval.k and eval.retrieval_k must be >= 1, got {self.k}/{self.retrieval_k}")
        if not self.tau_knn > 0:
            raise InvalidConfig(f"eval.tau_knn must be positive, got {self.tau_knn}")
        if self.reference not in REFERENCE_SETS:
            raise InvalidConfig(f"eval.reference must be one of {REFERENCE_SETS}, got {self.reference!r}")
        if not 0. < self.confusion_holdout < 1.:
            raise InvalidConfig(f"eval.confusion_holdout must be in (0, 1), got {self.confusion_holdout}")
        self.probe.validate()
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class EvalReport:
    knn_accuracy: float
    linear_accuracy: float
    retrieval_precision_at_k: float
    confusion_loss: float
    k: int
    tau_knn: float
    retrieval_k: int
    reference: str
    n_reference: int
    n_query: int
    seeds: dict

    def to_dict(self):
        return asdict(self)


def _check_reference(reference_feats, reference_labels):
    reference_feats = as_vector(reference_feats)
    if reference_feats.ndim != 2 or not reference_feats.shape[0]:
        raise EmptyReference("the reference feature set is empty")
    reference_labels = np.asarray(reference_labels, dtype=np.int64)
    if len(reference_labels) != reference_feats.shape[0]:
        raise DimensionMismatch(f"{reference_feats.shape[0]} reference features, {len(reference_labels)} labels")
    return reference_feats, reference_labels


def _check_queries(query_feats, dim):
    query_feats = as_vector(query_feats)
    if query_feats.ndim != 2 or not query_feats.shape[0]:
        raise EmptyReference("the query feature set is empty")
    if query_feats.shape[1] != dim:
        raise DimensionMismatch(f"query dim {query_feats.shape[1]} != reference dim {dim}")
    return query_feats


def nearest_neighbors(reference_feats, query_feats, k) -> Tuple[np.ndarray, np.ndarray]:
    """
    :return: (neighbor ids, similarities), each n_query x min(k, N); equal similarities keep the lower index first
    """
    sims = query_feats @ reference_feats.T
    k = min(k, reference_feats.shape[0])
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def weighted_knn(reference_feats, reference_labels, query_feats, k=20, tau_knn=0.05,
                 num_classes: Optional[int] = None) -> np.ndarray:
    """
    Vote with exp(sim / tau_knn) over the k most similar reference features; ties go to the lowest class id.
    """
    if k < 1:
        raise InvalidConfig(f"k must be >= 1, got {k}")
    if not tau_knn > 0:
        raise InvalidConfig(f"tau_knn must be positive, got {tau_knn}")
    reference_feats, reference_labels = _check_reference(reference_feats, reference_labels)
    query_feats = _check_queries(query_feats, reference_feats.shape[1])
    if num_classes is None:
        num_classes = int(reference_labels.max()) + 1
    neighbor_ids, neighbor_sims = nearest_neighbors(reference_feats, query_feats, k)
    predictions = np.zeros(query_feats.shape[0], dtype=np.int64)
    for go_q in range(query_feats.shape[0]):
        class_scores = np.zeros(num_classes)
        np.add.at(class_scores, reference_labels[neighbor_ids[go_q]], np.exp(neighbor_sims[go_q] / tau_knn))
        predictions[go_q] = int(np.argmax(class_scores))
    return predictions


def accuracy(predictions, labels) -> float:
    labels = np.asarray(labels)
    if not len(labels):
        return 0.
    return float(np.mean(np.asarray(predictions) == labels))


class SoftmaxProbe(object):
    """
    Multinomial logistic regression fitted by full-batch gradient descent on frozen features.
    """
    def __init__(self, num_classes, dim, config: ProbeConfig = ProbeConfig()):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        self.weight = 0.01 * rng.standard_normal((num_classes, dim))
        self.bias = np.zeros(num_classes)
        self.n_iter = 0
        self.loss = math.inf

    def logits(self, feats):
        return as_vector(feats) @ self.weight.T + self.bias

    def fit(self, feats, labels):
        feats = as_vector(feats)
        one_hot = np.eye(self.weight.shape[0])[np.asarray(labels, dtype=np.int64)]
        n_samples = feats.shape[0]
        previous = math.inf
        for go_i in range(1, self.config.max_iter + 1):
            log_p = log_softmax(self.logits(feats), axis=1)
            loss = -float(np.sum(one_hot * log_p)) / n_samples
            residual = (np.exp(log_p) - one_hot) / n_samples
            self.weight -= self.config.lr * residual.T @ feats
            self.bias -= self.config.lr * residual.sum(axis=0)
            self.n_iter, self.loss = go_i, loss
            if abs(previous - loss) < self.config.tol:
                break
            previous = loss
        logger.trace(f"probe stopped after {self.n_iter} iterations at loss {self.loss!r}")
        return self

    def predict(self, feats):
        return np.argmax(self.logits(feats), axis=1)

    def log_proba(self, feats):
        return log_softmax(self.logits(feats), axis=1)


def linear_probe(reference_feats, reference_labels, query_feats, query_labels,
                 probe_config: ProbeConfig = ProbeConfig(), num_classes: Optional[int] = None) -> float:
    """accuracy on the queries of a softmax classifier trained on the reference features"""
    reference_feats, reference_labels = _check_reference(reference_feats, reference_labels)
    query_feats = _check_queries(query_feats, reference_feats.shape[1])
    if num_classes is None:
        num_classes = int(max(reference_labels.max(), np.max(query_labels))) + 1
    probe = SoftmaxProbe(num_classes, reference_feats.shape[1], probe_config).fit(reference_feats, reference_labels)
    return accuracy(probe.predict(query_feats), query_labels)


def retrieval_precision(reference_feats, reference_labels, query_feats, query_labels, k=5) -> float:
    """fraction of (query, top-k reference neighbor) pairs sharing the query's class"""
    if k < 1:
        raise InvalidConfig(f"k must be >= 1, got {k}")
    reference_feats, reference_labels = _check_reference(reference_feats, reference_labels)
    query_feats = _check_queries(query_feats, reference_feats.shape[1])
    neighbor_ids, _ = nearest_neighbors(reference_feats, query_feats, k)
    matches = reference_labels[neighbor_ids] == np.asarray(query_labels)[:, np.newaxis]
    return float(np.mean(matches))


def retrieval_table(reference_feats, reference_labels, query_feats, query_labels, k=5,
                    reference_ids: Optional[Sequence[int]] = None) -> List[list]:
    """rows of query_index,rank,neighbor_index,similarity,match for the retrieval dump"""
    reference_feats, reference_labels = _check_reference(reference_feats, reference_labels)
    query_feats = _check_queries(query_feats, reference_feats.shape[1])
    if reference_ids is None:
        reference_ids = np.arange(reference_feats.shape[0])
    neighbor_ids, neighbor_sims = nearest_neighbors(reference_feats, query_feats, k)
    rows = []
    for go_q, (ids, sims) in enumerate(zip(neighbor_ids, neighbor_sims)):
        for rank, (n_id, sim) in enumerate(zip(ids, sims), start=1):
            rows.append([go_q, rank, int(reference_ids[n_id]), float(sim),
                         int(reference_labels[n_id] == query_labels[go_q])])
    return rows


def confusion_loss(source_feats, target_feats, seed=12345, holdout=0.2,
                   probe_config: ProbeConfig = ProbeConfig()) -> float:
    """
    Held-out binary cross-entropy of a linear source-vs-target classifier, capped at ln 2
    (the loss of predicting 1/2 everywhere). Higher means the domains are harder to tell apart.
    """
    source_feats = as_vector(source_feats)
    target_feats = as_vector(target_feats)
    if source_feats.ndim != 2 or target_feats.ndim != 2 or not len(source_feats) or not len(target_feats):
        raise EmptyReference("confusion loss needs non-empty source and target feature sets")
    if source_feats.shape[1] != target_feats.shape[1]:
        raise DimensionMismatch(f"source dim {source_feats.shape[1]} != target dim {target_feats.shape[1]}")
    feats = np.vstack([source_feats, target_feats])
    domain_labels = np.concatenate([np.zeros(len(source_feats), dtype=np.int64),
                                    np.ones(len(target_feats), dtype=np.int64)])
    n_total = len(feats)
    if n_total < 2:
        raise EmptyReference("confusion loss needs at least two features to hold one out")
    n_hold = min(max(1, int(round(holdout * n_total))), n_total - 1)
    perm = np.random.default_rng(seed).permutation(n_total)
    held, train = perm[:n_hold], perm[n_hold:]
    probe = SoftmaxProbe(2, feats.shape[1], probe_config).fit(feats[train], domain_labels[train])
    log_p = probe.log_proba(feats[held])
    held_loss = -float(np.mean(log_p[np.arange(n_hold), domain_labels[held]]))
    return min(held_loss, math.log(2.))


########################################################################
###   SEALED-LABEL ACCESS
########################################################################

def sealed_labels(split, domain_tag) -> np.ndarray:
    if split.sealed is None:
        raise EmptyReference("this split carries no ground-truth labels for evaluation")
    return split.sealed.reveal(domain_tag)


def sealed_accuracy(split, domain_tag, indices, predictions) -> Optional[float]:
    """accuracy of predictions for the given sample indices, scored against the sealed labels"""
    if split.sealed is None or not len(indices):
        return None
    return accuracy(predictions, sealed_labels(split, domain_tag)[np.asarray(indices, dtype=np.int64)])


def reference_set(split, source_feats, reference):
    """(features, labels, source indices) of the kNN/probe reference"""
    if reference == "labeled":
        indices = split.labeled_indices()
        labels = split.labeled_labels()
    elif reference == "all_source":
        labels = sealed_labels(split, SOURCE)
        indices = np.flatnonzero(labels >= 0)
        labels = labels[indices]
    else:
        raise InvalidConfig(f"unknown reference set {reference!r}")
    if not len(indices):
        raise EmptyReference(f"the {reference} reference set is empty")
    return source_feats[indices], labels, indices


def evaluate_features(reference_feats, reference_labels, query_feats, query_labels,
                      source_feats, target_feats, config: EvalConfig, num_classes: int) -> EvalReport:
    config.validate()
    knn_predictions = weighted_knn(reference_feats, reference_labels, query_feats, config.k, config.tau_knn,
                                   num_classes=num_classes)
    report = EvalReport(
        knn_accuracy=accuracy(knn_predictions, query_labels),
        linear_accuracy=linear_probe(reference_feats, reference_labels, query_feats, query_labels,
                                     config.probe, num_classes=num_classes),
        retrieval_precision_at_k=retrieval_precision(reference_feats, reference_labels, query_feats, query_labels,
                                                     config.retrieval_k),
        confusion_loss=confusion_loss(source_feats, target_feats, config.seed, config.confusion_holdout,
                                      config.probe),
        k=config.k, tau_knn=config.tau_knn, retrieval_k=config.retrieval_k, reference=config.reference,
        n_reference=len(reference_labels), n_query=len(query_labels),
        seeds={"confusion": config.seed, "probe": config.probe.seed})
    logger.log("RES", f"kNN acc {report.knn_accuracy:.4f}, linear acc {report.linear_accuracy:.4f}, "
                      f"retrieval P@{config.retrieval_k} {report.retrieval_precision_at_k:.4f}, "
                      f"confusion {report.confusion_loss:.4f}")
    return report


def evaluate_split_features(split, source_feats, target_feats, config: EvalConfig) \
        -> Tuple[EvalReport, Optional[List[list]]]:
    """
    :param source_feats: unit-norm features of every source sample, by source index
    :param target_feats: unit-norm features of every target sample, by target index
    :return: (report, retrieval dump rows or None)
    """
    config.validate()
    reference_feats, reference_labels, reference_ids = reference_set(split, source_feats, config.reference)
    target_labels = sealed_labels(split, TARGET)
    scored = np.flatnonzero(target_labels >= 0)
    if not len(scored):
        raise EmptyReference("no target sample carries a ground-truth label")
    report = evaluate_features(reference_feats, reference_labels, target_feats[scored], target_labels[scored],
                               source_feats, target_feats, config, split.num_classes)
    dump = None
    if config.dump_retrieval:
        dump = retrieval_table(reference_feats, reference_labels, target_feats[scored], target_labels[scored],
                               config.retrieval_k, reference_ids=reference_ids)
        for row in dump:
            row[0] = int(scored[row[0]])
    return report, dump


def evaluate_model(model, split, config: EvalConfig) -> Tuple[EvalReport, Optional[List[list]]]:
    """embed every sample with the frozen model, then evaluate_split_features"""
    return evaluate_split_features(split, model.embed(split.source_inputs()), model.embed(split.target_inputs()),
                                   config)


def evaluate_raw(split, config: EvalConfig) -> Tuple[EvalReport, Optional[List[list]]]:
    """evaluate externally computed feature vectors stored as the split's inputs (L2-normalized first)"""
    return evaluate_split_features(split, l2_normalize(split.source_inputs()), l2_normalize(split.target_inputs()),
                                   config)


def make_knn_hook(split, config: EvalConfig, every: int = 1) -> Callable:
    """
    Between-epoch hook for run_pretrain: target weighted-kNN accuracy against the reference set,
    computed on every `every`-th epoch and None otherwise.
    """
    config.validate()
    target_labels = sealed_labels(split, TARGET)
    scored = np.flatnonzero(target_labels >= 0)

    def knn_hook(model, epoch) -> Optional[float]:
        if every < 1 or epoch % every:
            return None
        source_feats = model.embed(split.source_inputs())
        target_feats = model.embed(split.target_inputs())
        reference_feats, reference_labels, _ = reference_set(split, source_feats, config.reference)
        predictions = weighted_knn(reference_feats, reference_labels, target_feats[scored], config.k,
                                   config.tau_knn, num_classes=split.num_classes)
        return accuracy(predictions, target_labels[scored])

    return knn_hook
