#!/usr/bin/env python

import math
import os
import re
from dataclasses import replace

import numpy as np
import pytest

import cdsl
from cdsl.Encoder import EncoderModel
from cdsl.FeatureEval import EvalConfig, make_knn_hook
from cdsl.MemoryBank import init_banks
from cdsl.PreTrainer import TrainConfig, plan_epoch_batches, plan_paired_batches, epoch_rng, run_pretrain
from cdsl.utils import InvalidConfig, EmptyDomain


SMALL = TrainConfig(batch_source=8, batch_target=8, epochs=2, hidden=[16], d=4, seed=3)


def loss_columns(logs):
    return [(log.epoch, log.loss_wins, log.loss_cdm, log.loss_cds, log.knn_acc, log.loss_objective) for log in logs]


def test_train_config_defaults_and_validation():
    config = TrainConfig()
    assert (config.tau, config.eta, config.lr, config.momentum, config.weight_decay) == (0.5, 0.5, 0.01, 0.9, 5e-4)
    assert (config.batch_source, config.batch_target, config.objective) == (32, 32, "cds")
    for bad in ({"tau": 0.}, {"eta": 1.5}, {"lr": -1.}, {"momentum": 1.}, {"batch_source": 0}, {"epochs": -1},
                {"objective": "byol"}, {"hidden": [0]}, {"knn_every": -2}):
        with pytest.raises(InvalidConfig):
            replace(config, **bad).validate()


def test_epoch_plan_wraps_the_smaller_domain():
    plan = plan_epoch_batches(10, 4, 3, 3, np.random.default_rng(0))
    assert len(plan) == 4
    assert [len(source_ids) for source_ids, _ in plan] == [3, 3, 3, 1]
    assert sorted(np.concatenate([source_ids for source_ids, _ in plan]).tolist()) == list(range(10))
    for _, target_ids in plan:
        assert len(target_ids) == 3 and len(set(target_ids.tolist())) == 3
        assert set(target_ids.tolist()) <= set(range(4))
    with pytest.raises(InvalidConfig):
        plan_epoch_batches(10, 4, 3, 5, np.random.default_rng(0))


@pytest.mark.parametrize("n_source, n_target, batch", [(24, 24, 8), (30, 7, 5), (6, 50, 6), (33, 32, 32)])
def test_steps_per_epoch(n_source, n_target, batch):
    plan = plan_epoch_batches(n_source, n_target, batch, batch, epoch_rng(1, 1))
    assert len(plan) == math.ceil(max(n_source, n_target) / batch)


def test_paired_plan_handles_empty_sets():
    plan = plan_paired_batches([5, 0, 2], [2, 1, 2], np.random.default_rng(4))
    assert len(plan) == 3
    assert all(len(empty) == 0 for _, empty, _ in plan)
    assert [len(first) for first, _, _ in plan] == [2, 2, 1]


def test_epoch_rng_does_not_depend_on_history():
    assert np.array_equal(epoch_rng(5, 3).permutation(20), epoch_rng(5, 3).permutation(20))
    assert not np.array_equal(epoch_rng(5, 3).permutation(20), epoch_rng(5, 4).permutation(20))


def test_zero_epochs_returns_initial_state(small_split):
    config = replace(SMALL, epochs=0)
    result = run_pretrain(config, small_split)
    initial = EncoderModel.initialize(small_split.input_dim, config.hidden, config.d, seed=config.seed)
    assert result.model.same_parameters(initial)
    assert result.epoch_logs == []
    source_bank, target_bank = init_banks(initial, small_split)
    assert np.array_equal(result.banks[0].vectors, source_bank.vectors)
    assert np.array_equal(result.banks[1].vectors, target_bank.vectors)


def test_pretrain_is_deterministic(small_split):
    first = run_pretrain(SMALL, small_split)
    second = run_pretrain(SMALL, small_split)
    assert loss_columns(first.epoch_logs) == loss_columns(second.epoch_logs)
    assert first.model.same_parameters(second.model)
    assert np.array_equal(first.banks[1].vectors, second.banks[1].vectors)
    other = run_pretrain(replace(SMALL, seed=4), small_split)
    assert not other.model.same_parameters(first.model)


def test_epoch_logs_and_bank_norms(small_split):
    result = run_pretrain(replace(SMALL, epochs=3), small_split)
    assert [log.epoch for log in result.epoch_logs] == [1, 2, 3]
    for log in result.epoch_logs:
        assert abs(log.loss_cds - (log.loss_wins + log.loss_cdm)) < 1e-9
        assert log.loss_objective == pytest.approx(log.loss_cds, rel=1e-12)
        assert log.knn_acc is None
        assert len(log.csv_row()) == 7
    assert result.banks[0].max_norm_deviation() < 1e-9
    assert result.banks[1].max_norm_deviation() < 1e-9
    assert "L_CDS" in str(result.epoch_logs[0])


def test_caller_model_is_not_modified(small_split):
    model = EncoderModel.initialize(2, SMALL.hidden, SMALL.d, seed=99)
    before = model.copy()
    result = run_pretrain(SMALL, small_split, model=model)
    assert model.same_parameters(before)
    assert not result.model.same_parameters(before)


def test_stage_one_reads_no_labels(small_split):
    with_labels = run_pretrain(SMALL, small_split)
    without_labels = run_pretrain(SMALL, small_split.without_labels())
    assert with_labels.model.same_parameters(without_labels.model)
    assert loss_columns(with_labels.epoch_logs) == loss_columns(without_labels.epoch_logs)
    assert np.array_equal(with_labels.banks[0].vectors, without_labels.banks[0].vectors)
    assert np.array_equal(with_labels.banks[1].vectors, without_labels.banks[1].vectors)


def test_sealed_labels_are_opened_only_by_evaluation():
    package_dir = os.path.dirname(cdsl.__file__)
    openers = set()
    for file_name in os.listdir(package_dir):
        if file_name.endswith(".py"):
            with open(os.path.join(package_dir, file_name), encoding="utf-8") as input_h:
                source_text = input_h.read()
            if re.search(r"\.reveal\(", source_text) or re.search(r"def reveal\(", source_text):
                openers.add(file_name)
            if file_name in ("PreTrainer.py", "MemoryBank.py", "CDSLoss.py", "Encoder.py"):
                assert "sealed" not in source_text
                assert "labeled_labels" not in source_text
    assert openers == {"DataGenerator.py", "FeatureEval.py"}


def test_resume_equals_uninterrupted_run(small_split):
    straight = run_pretrain(replace(SMALL, epochs=4), small_split)
    half = run_pretrain(replace(SMALL, epochs=2), small_split)
    resumed = run_pretrain(replace(SMALL, epochs=4), small_split, model=half.model, banks=half.banks,
                           optimizer_state=half.optimizer.to_dict(), start_epoch=2)
    assert [log.epoch for log in resumed.epoch_logs] == [3, 4]
    assert resumed.model.same_parameters(straight.model)
    assert np.array_equal(resumed.banks[0].vectors, straight.banks[0].vectors)
    assert loss_columns(resumed.epoch_logs) == loss_columns(straight.epoch_logs[2:])


def test_eval_hook_runs_between_epochs(small_split):
    seen = []

    def hook(model, epoch):
        seen.append((epoch, model.version))
        return 0.25 if epoch == 2 else None

    result = run_pretrain(replace(SMALL, epochs=3), small_split, eval_hook=hook)
    assert [epoch for epoch, _ in seen] == [1, 2, 3]
    assert [log.knn_acc for log in result.epoch_logs] == [None, 0.25, None]

    knn_hook = make_knn_hook(small_split, EvalConfig(k=5), every=2)
    result = run_pretrain(replace(SMALL, epochs=2), small_split, eval_hook=knn_hook)
    assert result.epoch_logs[0].knn_acc is None
    assert 0. <= result.epoch_logs[1].knn_acc <= 1.


@pytest.mark.parametrize("objective", ["in_domain", "cross_domain", "union_id"])
def test_alternative_objectives(small_split, objective):
    result = run_pretrain(replace(SMALL, objective=objective), small_split)
    log = result.epoch_logs[-1]
    assert np.isfinite(log.loss_objective)
    if objective == "in_domain":
        assert log.loss_objective == log.loss_wins
    if objective == "cross_domain":
        assert log.loss_objective == log.loss_cdm


def test_single_sample_domains_make_matching_inert(make_unlabeled_split):
    split = make_unlabeled_split([[1., 2.]], [[-0.5, 3.]])
    config = TrainConfig(batch_source=1, batch_target=1, epochs=3, hidden=[], d=3, seed=1)
    cds = run_pretrain(config, split)
    in_domain = run_pretrain(replace(config, objective="in_domain"), split)
    assert cds.model.same_parameters(in_domain.model)
    assert all(log.loss_cdm == 0. for log in cds.epoch_logs)


def test_pretrain_needs_both_domains(make_unlabeled_split):
    with pytest.raises(EmptyDomain):
        run_pretrain(SMALL, make_unlabeled_split([[1., 0.]] * 8, []))
    with pytest.raises(InvalidConfig):
        run_pretrain(replace(SMALL, batch_target=30), make_unlabeled_split([[1., 0.]] * 8, [[0., 1.]] * 8))
