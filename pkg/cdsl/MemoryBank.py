#!/usr/bin/env python

"""
Per-domain memory banks of cached unit-norm features, one row per sample identity.
"""
import os
from typing import Tuple

import numpy as np
from loguru import logger

from cdsl.numerics import as_vector, EPS_NORM
from cdsl.utils import DOMAINS, SOURCE, TARGET, DimensionMismatch, IndexOutOfRange, EmptyDomain, \
    NormTooSmall, InvalidConfig, IoError, ParseError, read_csv_rows, write_csv


class MemoryBank(object):
    """
    :param vectors: N x d matrix; row index is the sample identity within the domain
    :param domain_tag: source or target
    :param renormalize: rescale rows to unit norm after each momentum blend
    """
    def __init__(self, vectors, domain_tag, renormalize=True):
        if domain_tag not in DOMAINS:
            raise InvalidConfig(f"domain_tag must be one of {DOMAINS}, got {domain_tag!r}")
        vectors = as_vector(vectors)
        if vectors.ndim != 2:
            raise DimensionMismatch(f"bank vectors must be a 2-D matrix, got shape {vectors.shape}")
        self.vectors = vectors.copy()
        self.domain_tag = domain_tag
        self.renormalize = renormalize

    def __len__(self):
        return self.vectors.shape[0]

    def __repr__(self):
        return f"MemoryBank({self.domain_tag}, N={self.size}, d={self.dim})"

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def copy(self):
        return MemoryBank(self.vectors, self.domain_tag, self.renormalize)

    def max_norm_deviation(self):
        if not self.size:
            return 0.
        return float(np.max(np.abs(np.linalg.norm(self.vectors, axis=1) - 1.)))

    def save_csv(self, csv_file):
        """
        first line '#domain_tag=<tag>;N=<N>;d=<d>', then 'index,dim0,..' and one row per sample
        """
        header = ["index"] + [f"dim{go_d}" for go_d in range(self.dim)]
        rows = ([go_r] + [float(val) for val in row] for go_r, row in enumerate(self.vectors))
        write_csv(csv_file, header, rows,
                  comments=[f"#domain_tag={self.domain_tag};N={self.size};d={self.dim}"])

    @classmethod
    def load_csv(cls, csv_file, renormalize=True):
        if not os.path.isfile(csv_file):
            raise IoError(f"Bank file not found: {csv_file}")
        with open(csv_file, encoding="utf-8") as input_h:
            first_line = input_h.readline().strip()
        if not first_line.startswith("#domain_tag="):
            raise ParseError("missing '#domain_tag=..;N=..;d=..' line", line_number=1, path=csv_file)
        try:
            meta = dict(item.split("=", 1) for item in first_line[1:].split(";"))
            domain_tag, n_rows, dim = meta["domain_tag"], int(meta["N"]), int(meta["d"])
        except (KeyError, ValueError):
            raise ParseError(f"malformed bank metadata {first_line!r}", line_number=1, path=csv_file)
        header, rows = read_csv_rows(csv_file)
        if len(header) != dim + 1:
            raise DimensionMismatch(f"{csv_file}: header has {len(header) - 1} dims, metadata says d={dim}")
        vectors = np.zeros((n_rows, dim))
        if len(rows) != n_rows:
            raise ParseError(f"metadata says N={n_rows} but {len(rows)} rows found", line_number=1, path=csv_file)
        seen = set()
        for line_number, row in rows:
            if len(row) != dim + 1:
                raise ParseError(f"expected {dim + 1} columns, got {len(row)}", line_number, csv_file)
            try:
                index = int(row[0])
                values = [float(val) for val in row[1:]]
            except ValueError as e:
                raise ParseError(str(e), line_number, csv_file)
            if not 0 <= index < n_rows:
                raise ParseError(f"row index {index} outside [0, {n_rows})", line_number, csv_file)
            if index in seen:
                raise ParseError(f"row index {index} repeated", line_number, csv_file)
            seen.add(index)
            vectors[index] = values
        return cls(vectors, domain_tag, renormalize=renormalize)


def embed_rows(model, x_matrix) -> np.ndarray:
    """one encoder_forward call per row, so each row equals a fresh single-sample forward bitwise"""
    from cdsl.Encoder import encoder_forward
    x_matrix = as_vector(x_matrix)
    features = np.zeros((x_matrix.shape[0], model.output_dim))
    for go_r, x_ in enumerate(x_matrix):
        features[go_r] = encoder_forward(model, x_)[0]
    return features


def init_banks(model, split, renormalize=True) -> Tuple[MemoryBank, MemoryBank]:
    """
    Fill V^s with features of every source sample (labeled and unlabeled, ordered by source index)
    and V^t with features of every target sample.
    """
    source_x = split.source_inputs()
    target_x = split.target_inputs()
    if not len(source_x):
        raise EmptyDomain("cannot initialize the source bank from an empty source domain")
    if not len(target_x):
        raise EmptyDomain("cannot initialize the target bank from an empty target domain")
    source_bank = MemoryBank(embed_rows(model, source_x), SOURCE, renormalize=renormalize)
    target_bank = MemoryBank(embed_rows(model, target_x), TARGET, renormalize=renormalize)
    logger.debug(f"initialized banks: {source_bank}, {target_bank}")
    return source_bank, target_bank


def bank_similarities(bank: MemoryBank, f) -> np.ndarray:
    """
    :param f: one feature vector, or a matrix of feature rows
    :return: cosine scores against every bank row (vector, or one row of scores per feature)
    """
    f = as_vector(f)
    if f.shape[-1] != bank.dim:
        raise DimensionMismatch(f"feature dim {f.shape[-1]} does not match bank dim {bank.dim}")
    return f @ bank.vectors.T


def bank_update(bank: MemoryBank, index: int, f, eta: float) -> MemoryBank:
    """
    row <- (1 - eta) * row + eta * f, then rescaled to unit norm when the bank renormalizes.
    Only row `index` is touched; the bank is modified in place and returned.
    """
    if not 0 <= index < bank.size:
        raise IndexOutOfRange(f"bank index {index} outside [0, {bank.size})")
    if not 0. <= eta <= 1.:
        raise InvalidConfig(f"eta must be within [0, 1], got {eta}")
    f = as_vector(f)
    if f.shape != (bank.dim,):
        raise DimensionMismatch(f"feature of shape {f.shape} does not fit a bank of dim {bank.dim}")
    if eta == 0.:
        return bank
    if eta == 1.:
        bank.vectors[index] = f
        return bank
    blended = (1. - eta) * bank.vectors[index] + eta * f
    norm = np.linalg.norm(blended)
    if norm <= EPS_NORM:
        raise NormTooSmall(f"momentum blend of bank row {index} vanished (norm {norm:.3g})")
    bank.vectors[index] = blended / norm if bank.renormalize else blended
    return bank
