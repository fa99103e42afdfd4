#!/usr/bin/env python

"""
Stage runners behind the CLI commands, and the multi-arm, multi-seed comparison experiment.
Every artifact embeds the resolved configuration.
"""
import os
from collections import OrderedDict
from multiprocessing import Pool
from typing import Dict, List, Optional, Tuple

import dill
from loguru import logger

from cdsl.Adapter import ADAPT_CSV_HEADER, run_adapt, select_lambda
from cdsl.DataGenerator import generate_two_domain, build_split, split_from_labeled, load_feature_csv, \
    save_feature_csv, DatasetSplit
from cdsl.Encoder import EncoderModel
from cdsl.ExperimentConfig import ExperimentConfig, parse_config
from cdsl.FeatureEval import RETRIEVAL_HEADER, evaluate_model, evaluate_raw, make_knn_hook
from cdsl.MemoryBank import MemoryBank
from cdsl.PreTrainer import EPOCH_CSV_HEADER, PretrainResult, run_pretrain
from cdsl.utils import SOURCE, TARGET, InvalidConfig, config_comment, median, read_csv_rows, read_json, \
    run_dill_encoded, write_csv, write_json


MODEL_JSON = "model.json"
OPTIMIZER_JSON = "optimizer.json"
SOURCE_BANK_CSV = "source_bank.csv"
TARGET_BANK_CSV = "target_bank.csv"
PRETRAIN_CSV = "pretrain_epochs.csv"
ADAPT_CSV = "adapt_epochs.csv"
HEAD_JSON = "classifier.json"
ADAPTED_MODEL_JSON = "model_adapted.json"
SUMMARY_JSON = "summary.json"
EVAL_JSON = "eval.json"
RETRIEVAL_CSV = "retrieval.csv"
COMPARISON_CSV = "comparison.csv"
COMPARISON_HEADER = ["arm", "seed", "knn_acc", "linear_acc", "retrieval_precision", "confusion_loss",
                     "adapt_target_acc", "final_loss_cdm"]


########################################################################
###   DATA
########################################################################

def generate_data(config: ExperimentConfig):
    data = config.data
    return generate_two_domain(data.num_classes, data.counts(), data.input_dim, data.cluster_sigma,
                               data.shift.to_spec(), data.seed)


def load_split(config: ExperimentConfig) -> DatasetSplit:
    """the configured CSV files (with split.json if given), or freshly generated data"""
    if config.data.from_files:
        source = load_feature_csv(config.data.source_csv)
        target = load_feature_csv(config.data.target_csv, expected_dim=len(source[0].x) if source else None)
        for sample in source:
            if sample.domain_tag != SOURCE:
                raise InvalidConfig(f"{config.data.source_csv} holds a {sample.domain_tag} row ({sample.index})")
        for sample in target:
            if sample.domain_tag != TARGET:
                raise InvalidConfig(f"{config.data.target_csv} holds a {sample.domain_tag} row ({sample.index})")
        if config.data.split_json is not None:
            labeled = read_json(config.data.split_json)["labeled"]
            labeled_ids = [i_ for members in labeled.values() for i_ in members]
            return split_from_labeled(source, target, labeled_ids, num_classes=config.data.num_classes)
        return build_split(source, target, config.split.shots_per_class, config.split.label_fraction,
                           config.split.seed, num_classes=config.data.num_classes)
    source, target = generate_data(config)
    return build_split(source, target, config.split.shots_per_class, config.split.label_fraction, config.split.seed,
                       num_classes=config.data.num_classes)


def gen_data_stage(config: ExperimentConfig, out_dir) -> Dict[str, str]:
    """source.csv, target.csv (full labels) and split.json (labeled source indices per class)"""
    source, target = generate_data(config)
    split = build_split(source, target, config.split.shots_per_class, config.split.label_fraction,
                        config.split.seed, num_classes=config.data.num_classes)
    comments = [config_comment(config.to_dict())]
    paths = {name: os.path.join(out_dir, name) for name in ("source.csv", "target.csv", "split.json")}
    save_feature_csv(paths["source.csv"], source, comments=comments)
    save_feature_csv(paths["target.csv"], target, comments=comments)
    write_json(paths["split.json"], {
        "config": config.to_dict(),
        "num_classes": split.num_classes,
        "labeled": {str(label): members for label, members in split.labeled_by_class().items()}})
    logger.info(f"wrote {len(source)} source and {len(target)} target samples ({split.summary()}) to {out_dir}")
    return paths


########################################################################
###   STAGES
########################################################################

def load_pretrain_dir(resume_dir):
    """model, banks, optimizer state and completed epoch rows of a previous pretrain output directory"""
    model_file = os.path.join(resume_dir, MODEL_JSON)
    model_doc = read_json(model_file)
    model = EncoderModel.from_dict(model_doc)
    banks = (MemoryBank.load_csv(os.path.join(resume_dir, SOURCE_BANK_CSV)),
             MemoryBank.load_csv(os.path.join(resume_dir, TARGET_BANK_CSV)))
    optimizer_state = read_json(os.path.join(resume_dir, OPTIMIZER_JSON))
    _, previous_rows = read_csv_rows(os.path.join(resume_dir, PRETRAIN_CSV))
    return model, banks, optimizer_state, int(model_doc.get("epochs_done", 0)), [row for _, row in previous_rows]


def pretrain_stage(config: ExperimentConfig, split: DatasetSplit, out_dir, resume_dir=None) -> PretrainResult:
    """run_pretrain plus model.json, optimizer.json, both bank CSVs and the epoch CSV"""
    model = banks = optimizer_state = None
    start_epoch = 0
    previous_rows = []
    if resume_dir is not None:
        model, banks, optimizer_state, start_epoch, previous_rows = load_pretrain_dir(resume_dir)
        logger.info(f"resuming from {resume_dir} after epoch {start_epoch}")
        for bank in banks:
            bank.renormalize = config.pretrain.renormalize_bank
    eval_hook = None
    if config.pretrain.knn_every and split.sealed is not None:
        eval_hook = make_knn_hook(split, config.eval, every=config.pretrain.knn_every)
    result = run_pretrain(config.pretrain, split.without_labels(), eval_hook=eval_hook, model=model, banks=banks,
                          optimizer_state=optimizer_state, start_epoch=start_epoch)
    config_dict = config.to_dict()
    epochs_done = max(start_epoch, config.pretrain.epochs)
    result.model.save(os.path.join(out_dir, MODEL_JSON), extra={"config": config_dict, "epochs_done": epochs_done})
    write_json(os.path.join(out_dir, OPTIMIZER_JSON), result.optimizer.to_dict())
    result.banks[0].save_csv(os.path.join(out_dir, SOURCE_BANK_CSV))
    result.banks[1].save_csv(os.path.join(out_dir, TARGET_BANK_CSV))
    write_csv(os.path.join(out_dir, PRETRAIN_CSV), EPOCH_CSV_HEADER,
              previous_rows + [log.csv_row() for log in result.epoch_logs], comments=[config_comment(config_dict)])
    return result


def adapt_stage(config: ExperimentConfig, split: DatasetSplit, model: EncoderModel, out_dir):
    """(optional lambda search,) run_adapt, classifier.json, model_adapted.json, adapt_epochs.csv, summary.json"""
    adapt_config = config.adapt
    lambda_search = None
    if adapt_config.lambda_grid:
        best_lam, summaries = select_lambda(model, split, adapt_config, adapt_config.lambda_grid)
        adapt_config = adapt_config.with_lambda(best_lam)
        lambda_search = [{"lambda": lam, "best_val_acc": summary["best_val_acc"],
                          "best_target_acc": summary["best_target_acc"]} for lam, summary in summaries.items()]
    result = run_adapt(model, split, adapt_config)
    config_dict = config.to_dict()
    result.head.save(os.path.join(out_dir, HEAD_JSON), extra={"config": config_dict})
    result.model.save(os.path.join(out_dir, ADAPTED_MODEL_JSON), extra={"config": config_dict})
    write_csv(os.path.join(out_dir, ADAPT_CSV), ADAPT_CSV_HEADER, [log.csv_row() for log in result.epoch_logs],
              comments=[config_comment(config_dict)])
    summary = OrderedDict(result.summary)
    if lambda_search is not None:
        summary["lambda_search"] = lambda_search
    summary["config"] = config_dict
    write_json(os.path.join(out_dir, SUMMARY_JSON), summary)
    return result


def eval_stage(config: ExperimentConfig, split: DatasetSplit, model: Optional[EncoderModel], out_dir):
    """EvalReport of the model's features, or of the raw inputs as features when no model is given"""
    if model is None:
        report, dump = evaluate_raw(split, config.eval)
    else:
        report, dump = evaluate_model(model, split, config.eval)
    config_dict = config.to_dict()
    write_json(os.path.join(out_dir, EVAL_JSON), {"config": config_dict, "report": report.to_dict()})
    if dump is not None:
        write_csv(os.path.join(out_dir, RETRIEVAL_CSV), RETRIEVAL_HEADER, dump, comments=[config_comment(config_dict)])
    return report


########################################################################
###   PIPELINE
########################################################################

def run_arm_task(config_dict, arm, seed, out_dir) -> Dict:
    """one (arm, seed) task: pre-train (unless no_pretrain), evaluate features, adapt"""
    config = parse_config(config_dict).with_seed(seed)
    task_dir = os.path.join(out_dir, arm, f"seed_{seed}")
    os.makedirs(task_dir, exist_ok=True)
    split = load_split(config)
    final_loss_cdm = None
    if arm == "no_pretrain":
        model = EncoderModel.initialize(split.input_dim, config.pretrain.hidden, config.pretrain.d,
                                        seed=config.pretrain.seed)
        model.save(os.path.join(task_dir, MODEL_JSON), extra={"config": config.to_dict(), "epochs_done": 0})
    else:
        config.pretrain.objective = arm
        result = pretrain_stage(config, split, task_dir)
        model = result.model
        if result.epoch_logs:
            final_loss_cdm = result.epoch_logs[-1].loss_cdm
    report = eval_stage(config, split, model, task_dir)
    adapt_result = adapt_stage(config, split, model, task_dir)
    logger.info(f"finished arm {arm}, seed {seed}")
    return OrderedDict([
        ("arm", arm), ("seed", seed),
        ("knn_acc", report.knn_accuracy), ("linear_acc", report.linear_accuracy),
        ("retrieval_precision", report.retrieval_precision_at_k), ("confusion_loss", report.confusion_loss),
        ("adapt_target_acc", adapt_result.summary["best_target_acc"]), ("final_loss_cdm", final_loss_cdm)])


class ExperimentPipeline(object):
    """
    Runs every configured arm for every seed and writes the comparison table:
    per-seed rows, then one median row per arm.
    """
    def __init__(self, config: ExperimentConfig, out_dir, num_processes: Optional[int] = None):
        self.config = config
        self.out_dir = out_dir
        self.num_processes = num_processes or config.pipeline.num_processes
        self.rows = []

    def tasks(self) -> List[Tuple[str, int]]:
        return [(arm, seed) for arm in self.config.pipeline.arms for seed in self.config.pipeline.seeds]

    def run(self) -> List[Dict]:
        tasks = self.tasks()
        config_dict = self.config.to_dict()
        logger.info(f"running {len(tasks)} tasks with {self.num_processes} process(es)")
        if self.num_processes > 1:
            payloads = [dill.dumps((run_arm_task, (config_dict, arm, seed, self.out_dir))) for arm, seed in tasks]
            pool_obj = Pool(processes=min(self.num_processes, len(tasks)))
            try:
                task_rows = pool_obj.map(run_dill_encoded, payloads)
            finally:
                pool_obj.close()
                pool_obj.join()
        else:
            task_rows = [run_arm_task(config_dict, arm, seed, self.out_dir) for arm, seed in tasks]
        arm_order = {arm: go_a for go_a, arm in enumerate(self.config.pipeline.arms)}
        task_rows.sort(key=lambda row: (arm_order[row["arm"]], row["seed"]))
        self.rows = task_rows + self.median_rows(task_rows)
        self.write()
        return self.rows

    def median_rows(self, task_rows) -> List[Dict]:
        medians = []
        for arm in self.config.pipeline.arms:
            arm_rows = [row for row in task_rows if row["arm"] == arm]
            median_row = OrderedDict([("arm", arm), ("seed", "median")])
            for column in COMPARISON_HEADER[2:]:
                median_row[column] = median([row[column] for row in arm_rows])
            medians.append(median_row)
            logger.log("RES", f"{arm}: median kNN acc {median_row['knn_acc']!r}, "
                              f"median adapted target acc {median_row['adapt_target_acc']!r}")
        return medians

    def write(self):
        write_csv(os.path.join(self.out_dir, COMPARISON_CSV), COMPARISON_HEADER,
                  [[row[column] for column in COMPARISON_HEADER] for row in self.rows],
                  comments=[config_comment(self.config.to_dict())])
