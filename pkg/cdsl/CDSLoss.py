#!/usr/bin/env python

"""
Memory-bank losses for cross-domain self-supervised pre-training.

Every loss returns a LossReport with the batch-mean value and the analytic gradient
with respect to each batch feature. Bank rows are treated as constants.
"""
import math
from typing import Callable, Dict, List, Sequence

import numpy as np
from loguru import logger

from cdsl.MemoryBank import MemoryBank
from cdsl.numerics import as_vector, log_softmax_temp, check_temperature
from cdsl.utils import SOURCE, TARGET, DOMAINS, DimensionMismatch, IndexOutOfRange, EmptyDomain, EmptyBatch, \
    InvalidConfig


class BatchFeatures(object):
    """
    Features of one paired batch B^s U B^t.

    :param features: n x d matrix, one feature per batch member
    :param indices: identity of each member within its own domain bank
    :param domains: domain tag of each member
    """
    def __init__(self, features, indices: Sequence[int], domains: Sequence[str]):
        self.features = as_vector(features)
        if self.features.ndim != 2:
            raise DimensionMismatch(f"batch features must be n x d, got shape {self.features.shape}")
        self.indices = np.asarray(indices, dtype=np.int64)
        self.domains = list(domains)
        if not (len(self.indices) == len(self.domains) == self.features.shape[0]):
            raise DimensionMismatch(
                f"{self.features.shape[0]} features, {len(self.indices)} indices, {len(self.domains)} domain tags")
        for tag in set(self.domains):
            if tag not in DOMAINS:
                raise InvalidConfig(f"unknown domain tag {tag!r}")

    @classmethod
    def from_domains(cls, source_features, source_indices, target_features, target_indices):
        """source members first, then target members"""
        source_features = as_vector(source_features)
        target_features = as_vector(target_features)
        dim = source_features.shape[-1] if source_features.size else target_features.shape[-1]
        features = np.vstack([source_features.reshape(-1, dim), target_features.reshape(-1, dim)])
        return cls(features,
                   list(source_indices) + list(target_indices),
                   [SOURCE] * len(source_indices) + [TARGET] * len(target_indices))

    def __len__(self):
        return self.features.shape[0]

    def rows_of(self, domain_tag) -> List[int]:
        return [go_r for go_r, tag in enumerate(self.domains) if tag == domain_tag]

    def with_features(self, features):
        return BatchFeatures(features, self.indices, self.domains)


class LossReport(object):
    """
    :param value: batch-mean loss
    :param grads: n x d gradient with respect to the batch features
    :param diagnostics: per-sample terms and component values
    """
    def __init__(self, value: float, grads, diagnostics: Dict = None):
        self.value = float(value)
        self.grads = as_vector(grads)
        self.diagnostics = diagnostics if diagnostics is not None else {}

    def __repr__(self):
        return f"LossReport(value={self.value!r}, n={len(self.grads)})"


def _check_batch(batch: BatchFeatures, source_bank: MemoryBank, target_bank: MemoryBank, tau):
    check_temperature(tau)
    if not len(batch):
        raise EmptyBatch("loss requested for an empty batch")
    for bank in (source_bank, target_bank):
        if bank.size and batch.features.shape[1] != bank.dim:
            raise DimensionMismatch(f"batch feature dim {batch.features.shape[1]} != {bank} dim")


def _bank_of(domain_tag, source_bank, target_bank, opposite=False):
    if (domain_tag == SOURCE) != opposite:
        return source_bank
    return target_bank


def _instance_terms(f, positive, bank_vectors, tau):
    """
    -log softmax(V f / tau)[positive] and its gradient (sum_k p_k v_k - v_positive) / tau
    """
    log_p = log_softmax_temp(bank_vectors @ f, tau)
    term = -log_p[positive]
    grad = (np.exp(log_p) @ bank_vectors - bank_vectors[positive]) / tau
    return term, grad


def in_domain_loss(batch: BatchFeatures, source_bank: MemoryBank, target_bank: MemoryBank, tau) -> LossReport:
    """
    In-domain instance discrimination: each member's softmax spans only its own domain's bank,
    with its own (stale) bank row as the positive.
    """
    _check_batch(batch, source_bank, target_bank, tau)
    n_batch = len(batch)
    terms = np.zeros(n_batch)
    grads = np.zeros_like(batch.features)
    for go_r, (f_, index, tag) in enumerate(zip(batch.features, batch.indices, batch.domains)):
        bank = _bank_of(tag, source_bank, target_bank)
        if not 0 <= index < bank.size:
            raise IndexOutOfRange(f"{tag} index {index} outside bank of size {bank.size}")
        terms[go_r], grads[go_r] = _instance_terms(f_, index, bank.vectors, tau)
    value = math.fsum(terms) / n_batch
    logger.trace(f"in-domain terms: {terms.tolist()}")
    return LossReport(value, grads / n_batch, {"in_domain_terms": terms, "loss_wins": value})


def cross_domain_loss(batch: BatchFeatures, source_bank: MemoryBank, target_bank: MemoryBank, tau) -> LossReport:
    """
    Cross-domain matching: entropy of each member's similarity distribution over the opposite bank.
    dH/dz_k = -p_k (log p_k + H) with z = V f / tau.
    """
    _check_batch(batch, source_bank, target_bank, tau)
    n_batch = len(batch)
    terms = np.zeros(n_batch)
    grads = np.zeros_like(batch.features)
    for go_r, (f_, tag) in enumerate(zip(batch.features, batch.domains)):
        bank = _bank_of(tag, source_bank, target_bank, opposite=True)
        if not bank.size:
            raise EmptyDomain(f"the {bank.domain_tag} bank is empty; no cross-domain distribution for {tag}")
        log_p = log_softmax_temp(bank.vectors @ f_, tau)
        p_ = np.exp(log_p)
        ent = -float(np.sum(p_ * log_p))
        terms[go_r] = min(max(ent, 0.), math.log(bank.size))
        grads[go_r] = (-p_ * (log_p + ent)) @ bank.vectors / tau
    value = math.fsum(terms) / n_batch
    logger.trace(f"cross-domain terms: {terms.tolist()}")
    return LossReport(value, grads / n_batch, {"cross_domain_terms": terms, "loss_cdm": value})


def cds_loss(batch: BatchFeatures, source_bank: MemoryBank, target_bank: MemoryBank, tau) -> LossReport:
    """in-domain discrimination plus cross-domain matching"""
    in_report = in_domain_loss(batch, source_bank, target_bank, tau)
    cross_report = cross_domain_loss(batch, source_bank, target_bank, tau)
    diagnostics = dict(in_report.diagnostics)
    diagnostics.update(cross_report.diagnostics)
    return LossReport(in_report.value + cross_report.value, in_report.grads + cross_report.grads, diagnostics)


def union_instance_loss(batch: BatchFeatures, source_bank: MemoryBank, target_bank: MemoryBank, tau) -> LossReport:
    """
    Instance discrimination over one shared bank holding both domains (source rows, then target rows),
    ignoring the domain split. A target member j has union identity N_src + j.
    """
    _check_batch(batch, source_bank, target_bank, tau)
    union_vectors = np.vstack([source_bank.vectors, target_bank.vectors])
    n_batch = len(batch)
    terms = np.zeros(n_batch)
    grads = np.zeros_like(batch.features)
    for go_r, (f_, index, tag) in enumerate(zip(batch.features, batch.indices, batch.domains)):
        bank = _bank_of(tag, source_bank, target_bank)
        if not 0 <= index < bank.size:
            raise IndexOutOfRange(f"{tag} index {index} outside bank of size {bank.size}")
        union_id = index if tag == SOURCE else source_bank.size + index
        terms[go_r], grads[go_r] = _instance_terms(f_, union_id, union_vectors, tau)
    value = math.fsum(terms) / n_batch
    return LossReport(value, grads / n_batch, {"union_terms": terms, "loss_union": value})


OBJECTIVES: Dict[str, Callable[..., LossReport]] = {
    "cds": cds_loss,
    "in_domain": in_domain_loss,
    "cross_domain": cross_domain_loss,
    "union_id": union_instance_loss,
}


def get_objective(name) -> Callable[..., LossReport]:
    if name not in OBJECTIVES:
        raise InvalidConfig(f"unknown objective {name!r}; use one of {sorted(OBJECTIVES)}")
    return OBJECTIVES[name]
