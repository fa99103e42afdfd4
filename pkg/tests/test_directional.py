#!/usr/bin/env python

"""
Experiments that train several models on the default synthetic task and check the direction of the effect.
Marked slow; skip with pytest -m "not slow".
"""
import pytest

from cdsl.Adapter import run_adapt
from cdsl.DataGenerator import generate_two_domain, build_split
from cdsl.Encoder import EncoderModel
from cdsl.ExperimentConfig import ExperimentConfig, parse_config
from cdsl.FeatureEval import confusion_loss
from cdsl.Pipeline import ExperimentPipeline
from cdsl.PreTrainer import run_pretrain
from cdsl.utils import median


pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]


def default_task(seed):
    """3 classes, 50 per class and domain, 30 degree rotation plus [2, 0] shift, noise 0.1"""
    config = ExperimentConfig().with_seed(seed)
    data = config.data
    source, target = generate_two_domain(data.num_classes, data.counts(), data.input_dim, data.cluster_sigma,
                                         data.shift.to_spec(), data.seed)
    split = build_split(source, target, config.split.shots_per_class, None, config.split.seed,
                        num_classes=data.num_classes)
    return config, split


def domain_confusion(model, split, seed):
    return confusion_loss(model.embed(split.source_inputs()), model.embed(split.target_inputs()), seed=seed)


def test_cds_features_confuse_the_domains_more_than_random_ones():
    trained, untrained = [], []
    for seed in SEEDS:
        config, split = default_task(seed)
        result = run_pretrain(config.pretrain, split.without_labels())
        initial = EncoderModel.initialize(split.input_dim, config.pretrain.hidden, config.pretrain.d,
                                          seed=config.pretrain.seed)
        trained.append(domain_confusion(result.model, split, config.eval.seed))
        untrained.append(domain_confusion(initial, split, config.eval.seed))
    assert median(trained) > median(untrained)


def test_cross_domain_loss_descends_over_pretraining():
    drops = []
    for seed in SEEDS:
        config, split = default_task(seed)
        logs = run_pretrain(config.pretrain, split.without_labels()).epoch_logs
        assert len(logs) == 30
        drops.append(logs[0].loss_cdm - logs[-1].loss_cdm)
    assert median(drops) > 0.


def test_pipeline_orders_cds_above_its_ablations(tmp_path):
    config = parse_config({"pipeline": {"arms": ["no_pretrain", "in_domain", "cds"], "seeds": SEEDS}})
    rows = ExperimentPipeline(config, str(tmp_path)).run()
    medians = {row["arm"]: row["knn_acc"] for row in rows if row["seed"] == "median"}
    assert medians["cds"] >= medians["in_domain"]
    assert medians["cds"] >= medians["no_pretrain"]
    assert medians["cds"] > min(medians["in_domain"], medians["no_pretrain"])


def test_cds_objective_descends_over_pretraining():
    drops = []
    for seed in SEEDS:
        config, split = default_task(seed)
        logs = run_pretrain(config.pretrain, split.without_labels()).epoch_logs
        drops.append(logs[0].loss_cds - logs[-1].loss_cds)
    assert median(drops) > 0.


def test_cds_pretraining_helps_adaptation():
    pretrained, untrained = [], []
    for seed in SEEDS:
        config, split = default_task(seed)
        result = run_pretrain(config.pretrain, split.without_labels())
        initial = EncoderModel.initialize(split.input_dim, config.pretrain.hidden, config.pretrain.d,
                                          seed=config.pretrain.seed)
        pretrained.append(run_adapt(result.model, split, config.adapt).summary["best_target_acc"])
        untrained.append(run_adapt(initial, split, config.adapt).summary["best_target_acc"])
    assert median(pretrained) >= median(untrained)
