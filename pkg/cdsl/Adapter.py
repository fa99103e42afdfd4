#!/usr/bin/env python

"""
Stage-2 adaptation: a linear classifier on the encoder's features trained with
L = L_DA + lambda * L_su, where L_DA is cross-entropy on the labeled source batch (plus, optionally,
prediction entropy on the target batch) and L_su is prediction entropy on the unlabeled source batch.
"""
import math
import json
from collections import OrderedDict
from dataclasses import dataclass, field, asdict
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.special import log_softmax

from cdsl.Encoder import EncoderModel, OptimizerState, encoder_forward, encoder_backward, sgd_step
from cdsl.FeatureEval import sealed_accuracy, accuracy
from cdsl.PreTrainer import plan_paired_batches
from cdsl.numerics import as_vector
from cdsl.utils import SOURCE, TARGET, InvalidConfig, DimensionMismatch, EmptyBatch, IoError, ParseError


DA_MODES = ("source_only", "target_entmin")
LAMBDA_GRID = (0.01, 0.05, 0.1, 0.2, 0.3)
VALIDATION_SHOTS = 3


class ClassifierHead(object):
    """
    C(f) = softmax(W f + b); W: num_classes x d
    """
    def __init__(self, weight, bias):
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionMismatch(f"head weight {self.weight.shape} and bias {self.bias.shape} are inconsistent")
        self.version = 0

    @classmethod
    def initialize(cls, num_classes, d, seed=12345):
        limit = math.sqrt(6. / (num_classes + d))
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-limit, limit, size=(num_classes, d)), np.zeros(num_classes))

    @property
    def num_classes(self):
        return self.weight.shape[0]

    @property
    def dim(self):
        return self.weight.shape[1]

    def parameters(self):
        return [(self.weight, self.bias)]

    def copy(self):
        return ClassifierHead(self.weight.copy(), self.bias.copy())

    def to_dict(self):
        return {"shape": list(self.weight.shape),
                "weight": [float(w_) for w_ in self.weight.reshape(-1)],
                "bias": [float(b_) for b_ in self.bias]}

    @classmethod
    def from_dict(cls, head_dict):
        try:
            n_classes, dim = head_dict["shape"]
            return cls(np.array(head_dict["weight"], dtype=np.float64).reshape(n_classes, dim), head_dict["bias"])
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidConfig(f"malformed classifier document: {e}")

    def save(self, json_file, extra=None):
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(json_file, "w", encoding="utf-8", newline="\n") as output_h:
            json.dump(payload, output_h)
            output_h.write("\n")

    @classmethod
    def load(cls, json_file):
        try:
            with open(json_file, encoding="utf-8") as input_h:
                return cls.from_dict(json.load(input_h))
        except FileNotFoundError:
            raise IoError(f"Classifier file not found: {json_file}")
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, line_number=e.lineno, path=json_file)


@dataclass
class AdaptConfig:
    lam: float = 0.1
    da_mode: str = "source_only"
    target_entropy_weight: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 50
    batch: int = 32
    seed: int = 12345
    freeze_encoder: bool = False
    lambda_grid: List[float] = field(default_factory=list)

    def validate(self):
        if self.lam < 0:
            raise InvalidConfig(f"adapt.lambda must be non-negative, got {self.lam}")
        if self.da_mode not in DA_MODES:
            raise InvalidConfig(f"adapt.da_mode must be one of {DA_MODES}, got {self.da_mode!r}")
        if self.target_entropy_weight < 0:
            raise InvalidConfig(f"adapt.target_entropy_weight must be non-negative, got {self.target_entropy_weight}")
        if not self.lr > 0:
            raise InvalidConfig(f"adapt.lr must be positive, got {self.lr}")
        if not 0. <= self.momentum < 1.:
            raise InvalidConfig(f"adapt.momentum must be within [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"adapt.weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 0 or self.batch < 1:
            raise InvalidConfig(f"adapt.epochs must be >= 0 and adapt.batch >= 1, got {self.epochs}/{self.batch}")
        if any(l_ < 0 for l_ in self.lambda_grid):
            raise InvalidConfig(f"adapt.lambda_grid values must be non-negative, got {self.lambda_grid}")
        return self

    def with_lambda(self, lam):
        new_config = AdaptConfig(**asdict(self))
        new_config.lam = lam
        return new_config

    def to_dict(self):
        config_dict = asdict(self)
        config_dict["lambda"] = config_dict.pop("lam")
        return config_dict


ADAPT_CSV_HEADER = ["epoch", "loss_total", "loss_da", "loss_su", "src_unlabeled_acc", "target_acc", "val_acc",
                    "labeled_acc"]


@dataclass
class AdaptEpochLog:
    epoch: int
    loss_total: float
    loss_da: float
    loss_su: float
    src_unlabeled_acc: Optional[float]
    target_acc: Optional[float]
    val_acc: float
    labeled_acc: float

    def csv_row(self):
        return [self.epoch, self.loss_total, self.loss_da, self.loss_su, self.src_unlabeled_acc, self.target_acc,
                self.val_acc, self.labeled_acc]


class AdaptLossReport(NamedTuple):
    value: float
    loss_da: float
    loss_su: float
    head_grads: list
    encoder_grads: Optional[list]


class AdaptResult(NamedTuple):
    model: EncoderModel
    head: ClassifierHead
    epoch_logs: List[AdaptEpochLog]
    summary: Dict


def classifier_forward(head: ClassifierHead, f) -> np.ndarray:
    """softmax(W f + b) for one feature or a matrix of feature rows"""
    f = as_vector(f)
    if f.shape[-1] != head.dim:
        raise DimensionMismatch(f"feature dim {f.shape[-1]} does not match classifier dim {head.dim}")
    return np.exp(log_softmax(f @ head.weight.T + head.bias, axis=-1))


def _entropy_terms(logits):
    """per-row prediction entropy and its gradient with respect to the logits"""
    log_p = log_softmax(logits, axis=1)
    p_ = np.exp(log_p)
    ent = -np.sum(p_ * log_p, axis=1)
    return ent, -p_ * (log_p + ent[:, np.newaxis])


def adapt_loss(model: EncoderModel, head: ClassifierHead, labeled_x, labeled_y, unlabeled_x, target_x,
               config: AdaptConfig, with_encoder_grads: Optional[bool] = None) -> AdaptLossReport:
    """
    L_DA = mean CE on the labeled batch (+ target_entropy_weight * mean target entropy for target_entmin),
    L_su = mean entropy on the unlabeled source batch, value = L_DA + lambda * L_su.

    :param with_encoder_grads: backpropagate into the encoder; defaults to not config.freeze_encoder
    """
    labeled_x = as_vector(labeled_x)
    if not len(labeled_x):
        raise EmptyBatch("adaptation needs at least one labeled source sample per batch")
    labeled_y = np.asarray(labeled_y, dtype=np.int64)
    if with_encoder_grads is None:
        with_encoder_grads = not config.freeze_encoder
    dim = labeled_x.shape[1]
    unlabeled_x = as_vector(unlabeled_x).reshape(-1, dim)
    use_target = config.da_mode == "target_entmin"
    target_x = as_vector(target_x).reshape(-1, dim) if use_target else np.zeros((0, dim))
    n_l, n_u, n_t = len(labeled_x), len(unlabeled_x), len(target_x)

    features, cache = encoder_forward(model, np.vstack([labeled_x, unlabeled_x, target_x]))
    logits = features @ head.weight.T + head.bias
    d_logits = np.zeros_like(logits)

    log_p_l = log_softmax(logits[:n_l], axis=1)
    loss_ce = -math.fsum(log_p_l[np.arange(n_l), labeled_y]) / n_l
    d_logits[:n_l] = np.exp(log_p_l)
    d_logits[np.arange(n_l), labeled_y] -= 1.
    d_logits[:n_l] /= n_l

    loss_su = 0.
    if n_u:
        ent_u, d_ent_u = _entropy_terms(logits[n_l: n_l + n_u])
        loss_su = math.fsum(ent_u) / n_u
        d_logits[n_l: n_l + n_u] = config.lam * d_ent_u / n_u
    loss_da = loss_ce
    if n_t:
        ent_t, d_ent_t = _entropy_terms(logits[n_l + n_u:])
        loss_da = loss_ce + config.target_entropy_weight * math.fsum(ent_t) / n_t
        d_logits[n_l + n_u:] = config.target_entropy_weight * d_ent_t / n_t

    head_grads = [(d_logits.T @ features, d_logits.sum(axis=0))]
    encoder_grads = None
    if with_encoder_grads:
        encoder_grads, _ = encoder_backward(model, cache, d_logits @ head.weight)
    return AdaptLossReport(loss_da + config.lam * loss_su, loss_da, loss_su, head_grads, encoder_grads)


def predict(model: EncoderModel, head: ClassifierHead, x_matrix) -> np.ndarray:
    if not len(x_matrix):
        return np.zeros(0, dtype=np.int64)
    return np.argmax(classifier_forward(head, model.embed(x_matrix)), axis=1)


def hold_out_validation(split, seed) -> Tuple[np.ndarray, np.ndarray, str]:
    """
    :return: (training labeled indices, validation indices, protocol); 3 per class are held out when
             every class has at least 4 labels, otherwise validation reuses the training labels
    """
    by_class = split.labeled_by_class()
    if by_class and all(len(members) > VALIDATION_SHOTS for members in by_class.values()):
        rng = np.random.default_rng([seed, 1])
        validation = []
        for label, members in by_class.items():
            validation.extend(members[go_p] for go_p in rng.choice(len(members), VALIDATION_SHOTS, replace=False))
        held = set(validation)
        validation = np.array(sorted(held), dtype=np.int64)
        train = np.array([i_ for i_ in split.labeled_indices() if i_ not in held], dtype=np.int64)
        return train, validation, "holdout"
    train = split.labeled_indices()
    return train, train, "train"


def run_adapt(model: EncoderModel, split, config: AdaptConfig, head: Optional[ClassifierHead] = None) -> AdaptResult:
    """
    Train the classifier (and the encoder unless frozen) and keep the epoch with the best validation accuracy.
    The caller's model is not modified.

    :return: AdaptResult(best-epoch model, best-epoch head, per-epoch logs, summary)
    """
    config.validate()
    if not len(split.labeled_source):
        raise InvalidConfig("adaptation needs labeled source samples")
    model = model.copy()
    if head is None:
        head = ClassifierHead.initialize(split.num_classes, model.output_dim, seed=config.seed)
    else:
        head = head.copy()
    source_x = split.source_inputs()
    target_x = split.target_inputs()
    label_of = dict(zip(split.labeled_indices().tolist(), split.labeled_labels().tolist()))
    train_ids, val_ids, protocol = hold_out_validation(split, config.seed)
    train_y = np.array([label_of[i_] for i_ in train_ids], dtype=np.int64)
    val_y = np.array([label_of[i_] for i_ in val_ids], dtype=np.int64)
    unlabeled_ids = split.unlabeled_source_indices()
    target_ids = np.arange(split.n_target)

    head_optimizer = OptimizerState(head, config.lr, config.momentum, config.weight_decay)
    encoder_optimizer = None if config.freeze_encoder else \
        OptimizerState(model, config.lr, config.momentum, config.weight_decay)

    def measure(epoch, loss_values) -> AdaptEpochLog:
        return AdaptEpochLog(
            epoch, loss_values[0], loss_values[1], loss_values[2],
            sealed_accuracy(split, SOURCE, unlabeled_ids, predict(model, head, source_x[unlabeled_ids])),
            sealed_accuracy(split, TARGET, target_ids, predict(model, head, target_x)),
            accuracy(predict(model, head, source_x[val_ids]), val_y),
            accuracy(predict(model, head, source_x[train_ids]), train_y))

    initial = adapt_loss(model, head, source_x[train_ids], train_y, source_x[unlabeled_ids], target_x, config,
                         with_encoder_grads=False)
    epoch_logs = [measure(0, (initial.value, initial.loss_da, initial.loss_su))]
    best_log, best_model, best_head = epoch_logs[0], model.copy(), head.copy()
    set_sizes = [len(train_ids), len(unlabeled_ids), len(target_ids)]
    batch_sizes = [min(config.batch, max(n_, 1)) for n_ in set_sizes]
    logger.info(f"adapting (lambda={config.lam!r}, {config.da_mode}, frozen encoder={config.freeze_encoder}) "
                f"on {len(train_ids)} labeled, {len(unlabeled_ids)} unlabeled source, {len(target_ids)} target; "
                f"validation: {protocol}")

    for epoch in range(1, config.epochs + 1):
        plan = plan_paired_batches(set_sizes, batch_sizes, np.random.default_rng([config.seed, 2, epoch]))
        step_values = []
        for l_batch, u_batch, t_batch in plan:
            report = adapt_loss(model, head, source_x[train_ids[l_batch]], train_y[l_batch],
                                source_x[unlabeled_ids[u_batch]], target_x[t_batch], config)
            sgd_step(head, head_optimizer, report.head_grads)
            if encoder_optimizer is not None:
                sgd_step(model, encoder_optimizer, report.encoder_grads)
            step_values.append((report.value, report.loss_da, report.loss_su))
        means = tuple(math.fsum(v_[go_c] for v_ in step_values) / len(step_values) for go_c in range(3))
        epoch_log = measure(epoch, means)
        logger.info(f"adapt epoch {epoch}: L={means[0]:.6f}, L_DA={means[1]:.6f}, L_su={means[2]:.6f}, "
                    f"val acc={epoch_log.val_acc:.4f}")
        epoch_logs.append(epoch_log)
        if epoch_log.val_acc > best_log.val_acc:
            best_log, best_model, best_head = epoch_log, model.copy(), head.copy()

    final_log = epoch_logs[-1]
    summary = OrderedDict([
        ("best_epoch", best_log.epoch),
        ("best_val_acc", best_log.val_acc),
        ("best_target_acc", best_log.target_acc),
        ("best_src_unlabeled_acc", best_log.src_unlabeled_acc),
        ("final_target_acc", final_log.target_acc),
        ("final_labeled_acc", final_log.labeled_acc),
        ("lambda", config.lam),
        ("validation", protocol),
        ("n_validation", len(val_ids)),
    ])
    logger.log("RES", f"best epoch {best_log.epoch}: val acc {best_log.val_acc:.4f}, target acc "
                      f"{'NA' if best_log.target_acc is None else format(best_log.target_acc, '.4f')}")
    return AdaptResult(best_model, best_head, epoch_logs, summary)


def select_lambda(model: EncoderModel, split, config: AdaptConfig, grid: Sequence[float] = LAMBDA_GRID) \
        -> Tuple[float, Dict[float, Dict]]:
    """
    Run the adaptation once per lambda and keep the best validation accuracy; ties go to the smaller lambda.
    """
    if not grid:
        raise InvalidConfig("the lambda grid is empty")
    summaries = OrderedDict()
    best_lam, best_val = None, -math.inf
    for lam in sorted(grid):
        summaries[lam] = run_adapt(model, split, config.with_lambda(lam)).summary
        if summaries[lam]["best_val_acc"] > best_val:
            best_lam, best_val = lam, summaries[lam]["best_val_acc"]
    logger.log("RES", f"selected lambda {best_lam!r} (val acc {best_val:.4f})")
    return best_lam, summaries
