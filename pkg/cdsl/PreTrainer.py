#!/usr/bin/env python

"""
Stage-1 self-supervised pre-training: paired source/target batches, the memory-bank objective,
one SGD step per batch, then momentum updates of the touched bank rows.
"""
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger

from cdsl.CDSLoss import BatchFeatures, in_domain_loss, cross_domain_loss, get_objective, OBJECTIVES
from cdsl.Encoder import EncoderModel, OptimizerState, encoder_forward, encoder_backward, sgd_step, \
    DEFAULT_HIDDEN, DEFAULT_DIM
from cdsl.MemoryBank import MemoryBank, init_banks, bank_update
from cdsl.utils import InvalidConfig, EmptyDomain, DimensionMismatch, fmt_float


@dataclass
class TrainConfig:
    # low-dimensional inputs; image backbones use tau=0.05, lr=0.003
    tau: float = 0.5
    eta: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_source: int = 32
    batch_target: int = 32
    epochs: int = 30
    seed: int = 12345
    d: int = DEFAULT_DIM
    hidden: List[int] = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    objective: str = "cds"
    renormalize_bank: bool = True
    knn_every: int = 0

    def validate(self):
        if not self.tau > 0:
            raise InvalidConfig(f"pretrain.tau must be positive, got {self.tau}")
        if not 0. <= self.eta <= 1.:
            raise InvalidConfig(f"pretrain.eta must be within [0, 1], got {self.eta}")
        if not self.lr > 0:
            raise InvalidConfig(f"pretrain.lr must be positive, got {self.lr}")
        if not 0. <= self.momentum < 1.:
            raise InvalidConfig(f"pretrain.momentum must be within [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"pretrain.weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_source < 1 or self.batch_target < 1:
            raise InvalidConfig(f"pretrain batch sizes must be >= 1, got {self.batch_source}/{self.batch_target}")
        if self.epochs < 0:
            raise InvalidConfig(f"pretrain.epochs must be >= 0, got {self.epochs}")
        if self.d < 1 or any(h_ < 1 for h_ in self.hidden):
            raise InvalidConfig(f"invalid encoder architecture hidden={self.hidden}, d={self.d}")
        if self.objective not in OBJECTIVES:
            raise InvalidConfig(f"pretrain.objective must be one of {sorted(OBJECTIVES)}, got {self.objective!r}")
        if self.knn_every < 0:
            raise InvalidConfig(f"pretrain.knn_every must be >= 0, got {self.knn_every}")
        return self

    def to_dict(self):
        return asdict(self)


EPOCH_CSV_HEADER = ["epoch", "loss_wins", "loss_cdm", "loss_cds", "knn_acc", "seconds", "loss_objective"]


@dataclass
class EpochLog:
    epoch: int
    loss_wins: float
    loss_cdm: float
    loss_cds: float
    knn_acc: Optional[float]
    seconds: float
    loss_objective: float

    def csv_row(self):
        return [self.epoch, self.loss_wins, self.loss_cdm, self.loss_cds, self.knn_acc, self.seconds,
                self.loss_objective]

    def __str__(self):
        knn = "" if self.knn_acc is None else f", kNN={self.knn_acc:.4f}"
        return f"epoch {self.epoch}: L_W-INS={self.loss_wins:.6f}, L_CDM={self.loss_cdm:.6f}, " \
               f"L_CDS={self.loss_cds:.6f}{knn} ({self.seconds:.2f}s)"


class PretrainResult(NamedTuple):
    model: EncoderModel
    banks: Tuple[MemoryBank, MemoryBank]
    epoch_logs: List[EpochLog]
    optimizer: OptimizerState


def epoch_rng(seed, epoch):
    """shuffle stream of one epoch, independent of how many epochs ran before"""
    return np.random.default_rng([seed, epoch])


def plan_epoch_batches(n_source, n_target, batch_source, batch_target, rng) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Shuffle both domains independently and pair their batches. The epoch lasts
    max(ceil(n_source / batch_source), ceil(n_target / batch_target)) steps; a domain that
    needs that many batches ends with a partial one, the other wraps around its permutation.
    """
    if batch_source > n_source or batch_target > n_target:
        raise InvalidConfig(f"batch sizes {batch_source}/{batch_target} exceed domain sizes {n_source}/{n_target}")
    return [tuple(step) for step in plan_paired_batches([n_source, n_target], [batch_source, batch_target], rng)]


def plan_paired_batches(set_sizes, batch_sizes, rng) -> List[List[np.ndarray]]:
    """
    Shuffle every set independently (in the given order) and walk them in lockstep.
    Empty sets contribute empty index arrays; batch sizes must not exceed their set sizes.
    """
    perms = [rng.permutation(n_) for n_ in set_sizes]
    set_steps = [math.ceil(n_ / b_) if n_ else 0 for n_, b_ in zip(set_sizes, batch_sizes)]
    n_steps = max(set_steps)

    def take(perm, batch_size, go_step, wraps):
        if not len(perm):
            return perm
        start = go_step * batch_size
        if wraps:
            return perm[np.arange(start, start + batch_size) % len(perm)]
        return perm[start: start + batch_size]

    return [[take(perm, b_, go_s, steps_ < n_steps) for perm, b_, steps_ in zip(perms, batch_sizes, set_steps)]
            for go_s in range(n_steps)]


def train_step(model: EncoderModel, optimizer: OptimizerState, source_bank: MemoryBank, target_bank: MemoryBank,
               source_x, target_x, source_ids, target_ids, config: TrainConfig):
    """
    :return: (loss_wins, loss_cdm, loss_objective) of this batch, measured before the update
    """
    n_src = len(source_ids)
    features, cache = encoder_forward(model, np.vstack([source_x[source_ids], target_x[target_ids]]))
    batch = BatchFeatures.from_domains(features[:n_src], source_ids, features[n_src:], target_ids)
    in_report = in_domain_loss(batch, source_bank, target_bank, config.tau)
    cross_report = cross_domain_loss(batch, source_bank, target_bank, config.tau)
    if config.objective == "cds":
        grads = in_report.grads + cross_report.grads
        loss_objective = in_report.value + cross_report.value
    elif config.objective == "in_domain":
        grads, loss_objective = in_report.grads, in_report.value
    elif config.objective == "cross_domain":
        grads, loss_objective = cross_report.grads, cross_report.value
    else:
        report = get_objective(config.objective)(batch, source_bank, target_bank, config.tau)
        grads, loss_objective = report.grads, report.value
    param_grads, _ = encoder_backward(model, cache, grads)
    sgd_step(model, optimizer, param_grads)
    for go_r, index in enumerate(source_ids):
        bank_update(source_bank, int(index), features[go_r], config.eta)
    for go_r, index in enumerate(target_ids):
        bank_update(target_bank, int(index), features[n_src + go_r], config.eta)
    logger.debug(f"step: L_W-INS={in_report.value!r} L_CDM={cross_report.value!r} objective={loss_objective!r}")
    return in_report.value, cross_report.value, loss_objective


def run_pretrain(
        config: TrainConfig,
        split,
        eval_hook: Optional[Callable[[EncoderModel, int], Optional[float]]] = None,
        model: Optional[EncoderModel] = None,
        banks: Optional[Tuple[MemoryBank, MemoryBank]] = None,
        optimizer_state: Optional[dict] = None,
        start_epoch: int = 0) -> PretrainResult:
    """
    Pre-train the encoder on the unlabeled inputs of split. Labels are never read.

    :param eval_hook: called between epochs as eval_hook(frozen model copy, epoch); its return value
                      (or None) becomes the epoch's knn_acc
    :param model: starting model (a fresh seeded one by default); the caller's object is not modified
    :param banks: starting (source, target) banks, used together with model to resume a run
    :param optimizer_state: OptimizerState.to_dict() of the interrupted run
    :param start_epoch: number of epochs already completed; training continues up to config.epochs
    :return: PretrainResult(model, (source_bank, target_bank), epoch logs, optimizer state)
    """
    config.validate()
    if not split.n_source or not split.n_target:
        raise EmptyDomain(f"pre-training needs both domains; got {split.n_source} source, {split.n_target} target")
    source_x = split.source_inputs()
    target_x = split.target_inputs()
    if model is None:
        model = EncoderModel.initialize(split.input_dim, config.hidden, config.d, seed=config.seed)
    else:
        if model.input_dim != split.input_dim:
            raise DimensionMismatch(f"model expects {model.input_dim}-d inputs, data has {split.input_dim}")
        model = model.copy()
    if banks is None:
        source_bank, target_bank = init_banks(model, split, renormalize=config.renormalize_bank)
    else:
        source_bank, target_bank = banks[0].copy(), banks[1].copy()
        if source_bank.size != split.n_source or target_bank.size != split.n_target:
            raise DimensionMismatch(f"resumed banks ({source_bank.size}, {target_bank.size}) do not match "
                                    f"the data ({split.n_source}, {split.n_target})")
    if optimizer_state is None:
        optimizer = OptimizerState(model, config.lr, config.momentum, config.weight_decay)
    else:
        optimizer = OptimizerState.from_dict(model, optimizer_state)
    plan_epoch_batches(split.n_source, split.n_target, config.batch_source, config.batch_target,
                       epoch_rng(config.seed, 0))
    logger.info(f"pre-training ({config.objective}) for epochs {start_epoch + 1}..{config.epochs} "
                f"on {split.n_source} source / {split.n_target} target samples")

    epoch_logs = []
    for epoch in range(start_epoch + 1, config.epochs + 1):
        time_start = time.time()
        plan = plan_epoch_batches(split.n_source, split.n_target, config.batch_source, config.batch_target,
                                  epoch_rng(config.seed, epoch))
        step_losses = [train_step(model, optimizer, source_bank, target_bank, source_x, target_x,
                                  source_ids, target_ids, config)
                       for source_ids, target_ids in plan]
        loss_wins = math.fsum(s_[0] for s_ in step_losses) / len(step_losses)
        loss_cdm = math.fsum(s_[1] for s_ in step_losses) / len(step_losses)
        loss_objective = math.fsum(s_[2] for s_ in step_losses) / len(step_losses)
        knn_acc = eval_hook(model.copy(), epoch) if eval_hook is not None else None
        epoch_log = EpochLog(epoch, loss_wins, loss_cdm, loss_wins + loss_cdm, knn_acc,
                             time.time() - time_start, loss_objective)
        logger.info(str(epoch_log))
        logger.debug(f"max bank norm deviation: source {fmt_float(source_bank.max_norm_deviation())}, "
                     f"target {fmt_float(target_bank.max_norm_deviation())}")
        epoch_logs.append(epoch_log)
    return PretrainResult(model, (source_bank, target_bank), epoch_logs, optimizer)
