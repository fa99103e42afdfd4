#!/usr/bin/env python

"""
Synthetic two-domain data, the few-source-labels split, and dataset CSV files.
"""
import math
from collections import OrderedDict
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from cdsl.numerics import as_vector
from cdsl.utils import SOURCE, TARGET, DOMAINS, InvalidConfig, DimensionMismatch, ParseError, \
    read_csv_rows, write_csv


UNLABELED = -1
MEANS_RADIUS = 4.


class Sample(NamedTuple):
    x: np.ndarray
    label: Optional[int]
    domain_tag: str
    index: int

    def unlabeled(self):
        return self._replace(label=None)


class ShiftSpec(NamedTuple):
    rotation_angle: float = math.pi / 6.
    translation: Tuple[float, ...] = (2., 0.)
    scale: float = 1.
    noise_sigma: float = 0.1

    @classmethod
    def identity(cls):
        return cls(0., (0., 0.), 1., 0.)

    def check(self, input_dim):
        if not self.scale > 0:
            raise InvalidConfig(f"shift scale must be positive, got {self.scale}")
        if self.noise_sigma < 0:
            raise InvalidConfig(f"shift noise_sigma must be non-negative, got {self.noise_sigma}")
        if len(self.translation) > input_dim:
            raise InvalidConfig(f"translation of length {len(self.translation)} exceeds input_dim {input_dim}")

    def transform(self, x_matrix):
        """x -> scale * R x + translation; R rotates the first two coordinates"""
        x_matrix = as_vector(x_matrix)
        input_dim = x_matrix.shape[1]
        rotation = np.eye(input_dim)
        cos_a, sin_a = math.cos(self.rotation_angle), math.sin(self.rotation_angle)
        rotation[:2, :2] = [[cos_a, -sin_a], [sin_a, cos_a]]
        translation = np.zeros(input_dim)
        translation[:len(self.translation)] = self.translation
        return self.scale * (x_matrix @ rotation.T) + translation


def class_means(num_classes, input_dim):
    """means spaced evenly on a circle of radius 4 in the first two coordinates"""
    means = np.zeros((num_classes, input_dim))
    angles = 2. * math.pi * np.arange(num_classes) / num_classes
    means[:, 0] = MEANS_RADIUS * np.cos(angles)
    means[:, 1] = MEANS_RADIUS * np.sin(angles)
    return means


def generate_two_domain(
        num_classes: int = 3,
        per_class_count: Union[int, Tuple[int, int]] = 50,
        input_dim: int = 2,
        cluster_sigma: float = 0.5,
        shift: ShiftSpec = ShiftSpec(),
        seed: int = 12345) -> Tuple[List[Sample], List[Sample]]:
    """
    Draw isotropic Gaussian clusters for the source domain and shifted copies of the same
    class-conditional distributions for the target domain. Samples are ordered class by class.

    :param per_class_count: one count for both domains, or (source count, target count)
    :return: (source samples, target samples), each carrying its ground-truth label
    """
    if isinstance(per_class_count, int):
        per_class_count = (per_class_count, per_class_count)
    source_count, target_count = per_class_count
    if num_classes < 2:
        raise InvalidConfig(f"num_classes must be >= 2, got {num_classes}")
    if source_count < 2 or target_count < 2:
        raise InvalidConfig(f"per_class_count must be >= 2, got {per_class_count}")
    if input_dim < 2:
        raise InvalidConfig(f"input_dim must be >= 2, got {input_dim}")
    if cluster_sigma < 0:
        raise InvalidConfig(f"cluster_sigma must be non-negative, got {cluster_sigma}")
    shift.check(input_dim)
    means = class_means(num_classes, input_dim)
    source_seq, target_seq = np.random.SeedSequence(seed).spawn(2)
    source_rng = np.random.default_rng(source_seq)
    target_rng = np.random.default_rng(target_seq)

    labels_s = np.repeat(np.arange(num_classes), source_count)
    x_s = means[labels_s] + cluster_sigma * source_rng.standard_normal((len(labels_s), input_dim))
    labels_t = np.repeat(np.arange(num_classes), target_count)
    x_t = means[labels_t] + cluster_sigma * target_rng.standard_normal((len(labels_t), input_dim))
    x_t = shift.transform(x_t) + shift.noise_sigma * target_rng.standard_normal(x_t.shape)

    source = [Sample(x_, int(y_), SOURCE, go_i) for go_i, (x_, y_) in enumerate(zip(x_s, labels_s))]
    target = [Sample(x_, int(y_), TARGET, go_i) for go_i, (x_, y_) in enumerate(zip(x_t, labels_t))]
    logger.debug(f"generated {len(source)} source and {len(target)} target samples of dim {input_dim}")
    return source, target


def labeled_count(class_size, shots_per_class=None, label_fraction=None):
    if shots_per_class is not None:
        return shots_per_class
    return max(1, math.ceil(label_fraction * class_size))


def split_few_shot(
        source: Sequence[Sample],
        shots_per_class: Optional[int] = None,
        label_fraction: Optional[float] = None,
        seed: int = 12345) -> Tuple[List[Sample], List[Sample]]:
    """
    Pick labeled source samples per class uniformly without replacement; every class keeps at least one.
    Percentage splits round up per class.

    :return: (D_s labeled samples, D_su samples with labels stripped), both in index order
    """
    if (shots_per_class is None) == (label_fraction is None):
        raise InvalidConfig("give exactly one of shots_per_class and label_fraction")
    if shots_per_class is not None and shots_per_class < 1:
        raise InvalidConfig(f"shots_per_class must be >= 1, got {shots_per_class}")
    if label_fraction is not None and not 0. < label_fraction <= 1.:
        raise InvalidConfig(f"label_fraction must be in (0, 1], got {label_fraction}")
    by_class = OrderedDict()
    for sample in source:
        if sample.label is None or sample.label < 0:
            raise InvalidConfig(f"source sample {sample.index} has no label to split on")
        by_class.setdefault(sample.label, []).append(sample)
    if not by_class:
        raise InvalidConfig("cannot split an empty source domain")
    rng = np.random.default_rng(seed)
    chosen = set()
    for label in sorted(by_class):
        members = by_class[label]
        n_labeled = labeled_count(len(members), shots_per_class, label_fraction)
        if n_labeled > len(members):
            raise InvalidConfig(
                f"{n_labeled} labeled samples requested for class {label}, which has only {len(members)}")
        picks = rng.choice(len(members), size=n_labeled, replace=False)
        chosen.update(members[go_p].index for go_p in picks)
    labeled = [sample for sample in source if sample.index in chosen]
    unlabeled = [sample.unlabeled() for sample in source if sample.index not in chosen]
    labeled.sort(key=lambda s_: s_.index)
    unlabeled.sort(key=lambda s_: s_.index)
    return labeled, unlabeled


class SealedLabels(object):
    """
    Ground-truth labels of every source and target sample, by index. Training code never reads this;
    evaluation reaches it through FeatureEval.
    """
    def __init__(self, source_labels, target_labels):
        self.__labels = {
            SOURCE: np.asarray(source_labels, dtype=np.int64),
            TARGET: np.asarray(target_labels, dtype=np.int64)}

    def reveal(self, domain_tag) -> np.ndarray:
        if domain_tag not in DOMAINS:
            raise InvalidConfig(f"unknown domain {domain_tag!r}")
        return self.__labels[domain_tag].copy()


class DatasetSplit(object):
    """
    D_s (labeled source), D_su (unlabeled source) and D_tu (unlabeled target).
    Source indices run contiguously over D_s U D_su; target indices over D_tu.
    """
    def __init__(self,
                 labeled_source: List[Sample],
                 unlabeled_source: List[Sample],
                 unlabeled_target: List[Sample],
                 num_classes: int,
                 sealed: Optional[SealedLabels] = None,
                 require_all_classes: bool = True):
        self.labeled_source = list(labeled_source)
        self.unlabeled_source = [s_.unlabeled() for s_ in unlabeled_source]
        self.unlabeled_target = [s_.unlabeled() for s_ in unlabeled_target]
        self.num_classes = num_classes
        self.sealed = sealed
        self.__check_indices(self.labeled_source + self.unlabeled_source, SOURCE)
        self.__check_indices(self.unlabeled_target, TARGET)
        if require_all_classes:
            seen = {s_.label for s_ in self.labeled_source}
            missing = [c_ for c_ in range(num_classes) if c_ not in seen]
            if missing:
                raise InvalidConfig(f"classes {missing} have no labeled source example")
        self.__source_x = self.__stack(sorted(self.labeled_source + self.unlabeled_source, key=lambda s_: s_.index))
        self.__target_x = self.__stack(self.unlabeled_target)

    @staticmethod
    def __check_indices(samples, domain_tag):
        indices = sorted(s_.index for s_ in samples)
        if indices != list(range(len(indices))):
            raise InvalidConfig(f"{domain_tag} indices must be unique and contiguous from 0")
        for s_ in samples:
            if s_.domain_tag != domain_tag:
                raise InvalidConfig(f"sample {s_.index} tagged {s_.domain_tag!r} placed in the {domain_tag} domain")

    @staticmethod
    def __stack(samples):
        if not samples:
            return np.zeros((0, 0))
        return np.vstack([as_vector(s_.x) for s_ in sorted(samples, key=lambda s_: s_.index)])

    @property
    def n_source(self):
        return len(self.labeled_source) + len(self.unlabeled_source)

    @property
    def n_target(self):
        return len(self.unlabeled_target)

    @property
    def input_dim(self):
        matrix = self.__source_x if self.n_source else self.__target_x
        return matrix.shape[1]

    def source_inputs(self) -> np.ndarray:
        """raw inputs of D_s U D_su ordered by source index"""
        return self.__source_x.copy()

    def target_inputs(self) -> np.ndarray:
        return self.__target_x.copy()

    def labeled_indices(self) -> np.ndarray:
        return np.array([s_.index for s_ in self.labeled_source], dtype=np.int64)

    def labeled_labels(self) -> np.ndarray:
        return np.array([s_.label for s_ in self.labeled_source], dtype=np.int64)

    def unlabeled_source_indices(self) -> np.ndarray:
        return np.array([s_.index for s_ in self.unlabeled_source], dtype=np.int64)

    def labeled_by_class(self) -> Dict[int, List[int]]:
        by_class = OrderedDict((c_, []) for c_ in range(self.num_classes))
        for s_ in self.labeled_source:
            by_class[s_.label].append(s_.index)
        return by_class

    def without_labels(self):
        """
        The same inputs with every label dropped: the view a purely self-supervised stage is entitled to.
        """
        return DatasetSplit(
            [], [s_.unlabeled() for s_ in self.labeled_source] + self.unlabeled_source, self.unlabeled_target,
            self.num_classes, sealed=None, require_all_classes=False)

    def summary(self):
        return f"|D_s|={len(self.labeled_source)}, |D_su|={len(self.unlabeled_source)}, " \
               f"|D_tu|={self.n_target}, classes={self.num_classes}"


def infer_num_classes(samples: Sequence[Sample]):
    labels = [s_.label for s_ in samples if s_.label is not None and s_.label >= 0]
    return max(labels) + 1 if labels else 0


def build_split(
        source: Sequence[Sample],
        target: Sequence[Sample],
        shots_per_class: Optional[int] = None,
        label_fraction: Optional[float] = None,
        seed: int = 12345,
        num_classes: Optional[int] = None) -> DatasetSplit:
    """split_few_shot over the source plus the sealed copy of every ground-truth label"""
    labeled, unlabeled = split_few_shot(source, shots_per_class, label_fraction, seed)
    return split_from_labeled(source, target, [s_.index for s_ in labeled], num_classes)


def split_from_labeled(source: Sequence[Sample], target: Sequence[Sample], labeled_indices: Sequence[int],
                       num_classes: Optional[int] = None) -> DatasetSplit:
    if num_classes is None:
        num_classes = infer_num_classes(list(source) + list(target))
    labeled_indices = set(int(i_) for i_ in labeled_indices)
    by_index = {s_.index: s_ for s_ in source}
    missing = labeled_indices - set(by_index)
    if missing:
        raise InvalidConfig(f"labeled indices {sorted(missing)} are not source samples")
    for index in labeled_indices:
        if by_index[index].label is None or by_index[index].label < 0:
            raise InvalidConfig(f"source sample {index} is marked labeled but has no label")
    sealed = SealedLabels(
        [UNLABELED if s_.label is None else s_.label for s_ in sorted(source, key=lambda s_: s_.index)],
        [UNLABELED if s_.label is None else s_.label for s_ in sorted(target, key=lambda s_: s_.index)])
    return DatasetSplit(
        [by_index[i_] for i_ in sorted(labeled_indices)],
        [s_ for s_ in source if s_.index not in labeled_indices],
        list(target),
        num_classes,
        sealed=sealed)


def save_feature_csv(csv_file, samples: Sequence[Sample], comments: Sequence[str] = ()):
    """
    header 'domain,index,label,dim0,..'; label -1 marks an unlabeled sample
    """
    dim = len(samples[0].x) if samples else 0
    header = ["domain", "index", "label"] + [f"dim{go_d}" for go_d in range(dim)]
    rows = ([s_.domain_tag, s_.index, UNLABELED if s_.label is None else s_.label] +
            [float(val) for val in s_.x] for s_ in samples)
    write_csv(csv_file, header, rows, comments=comments)


def load_feature_csv(csv_file, expected_dim: Optional[int] = None) -> List[Sample]:
    header, rows = read_csv_rows(csv_file)
    if header[:3] != ["domain", "index", "label"]:
        raise ParseError(f"header must start with domain,index,label; got {','.join(header[:3])}",
                         line_number=1, path=csv_file)
    dim = len(header) - 3
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatch(f"{csv_file} holds {dim}-dimensional vectors, expected {expected_dim}")
    samples = []
    for line_number, row in rows:
        if len(row) != dim + 3:
            raise ParseError(f"expected {dim + 3} columns, got {len(row)}", line_number, csv_file)
        domain_tag = row[0]
        if domain_tag not in DOMAINS:
            raise ParseError(f"unknown domain {domain_tag!r}", line_number, csv_file)
        try:
            index = int(row[1])
            label = int(row[2])
            x_ = np.array([float(val) for val in row[3:]], dtype=np.float64)
        except ValueError as e:
            raise ParseError(str(e), line_number, csv_file)
        samples.append(Sample(x_, None if label < 0 else label, domain_tag, index))
    return samples
