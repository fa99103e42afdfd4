#!/usr/bin/env python

"""
One JSON document describes a whole experiment. It is parsed into nested dataclasses and
validated before any work starts; unknown keys are rejected.
"""
import json
import math
import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass, asdict
from typing import List, Optional, Union

import numpy as np

from cdsl.Adapter import AdaptConfig
from cdsl.DataGenerator import ShiftSpec
from cdsl.FeatureEval import EvalConfig, ProbeConfig
from cdsl.PreTrainer import TrainConfig
from cdsl.utils import InvalidConfig, IoError, ParseError


ARMS = ("no_pretrain", "union_id", "in_domain", "cds", "cross_domain")
DEFAULT_ARMS = ["no_pretrain", "union_id", "in_domain", "cds"]
# JSON keys that are Python keywords
KEY_ALIASES = {"lambda": "lam"}


@dataclass
class ShiftConfig:
    rotation_angle: float = math.pi / 6.
    translation: List[float] = field(default_factory=lambda: [2., 0.])
    scale: float = 1.
    noise_sigma: float = 0.1

    def to_spec(self):
        return ShiftSpec(self.rotation_angle, tuple(self.translation), self.scale, self.noise_sigma)


@dataclass
class DataConfig:
    num_classes: int = 3
    per_class_count: Union[int, List[int]] = 50
    input_dim: int = 2
    cluster_sigma: float = 0.5
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    seed: int = 12345
    source_csv: Optional[str] = None
    target_csv: Optional[str] = None
    split_json: Optional[str] = None

    def validate(self):
        if isinstance(self.per_class_count, list) and len(self.per_class_count) != 2:
            raise InvalidConfig(f"data.per_class_count must be one integer or [source, target], "
                                f"got {self.per_class_count}")
        if self.num_classes < 2:
            raise InvalidConfig(f"data.num_classes must be >= 2, got {self.num_classes}")
        counts = self.per_class_count if isinstance(self.per_class_count, list) else [self.per_class_count]
        if any(c_ < 2 for c_ in counts):
            raise InvalidConfig(f"data.per_class_count must be >= 2, got {self.per_class_count}")
        if self.input_dim < 2:
            raise InvalidConfig(f"data.input_dim must be >= 2, got {self.input_dim}")
        if self.cluster_sigma < 0:
            raise InvalidConfig(f"data.cluster_sigma must be non-negative, got {self.cluster_sigma}")
        if (self.source_csv is None) != (self.target_csv is None):
            raise InvalidConfig("data.source_csv and data.target_csv must be given together")
        if self.split_json is not None and self.source_csv is None:
            raise InvalidConfig("data.split_json requires data.source_csv and data.target_csv")
        return self

    @property
    def from_files(self):
        return self.source_csv is not None

    def counts(self):
        if isinstance(self.per_class_count, list):
            return tuple(self.per_class_count)
        return self.per_class_count


@dataclass
class SplitConfig:
    shots_per_class: Optional[int] = 1
    label_fraction: Optional[float] = None
    seed: int = 12345

    def validate(self):
        if (self.shots_per_class is None) == (self.label_fraction is None):
            raise InvalidConfig("give exactly one of split.shots_per_class and split.label_fraction")
        return self


@dataclass
class PipelineConfig:
    arms: List[str] = field(default_factory=lambda: list(DEFAULT_ARMS))
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    num_processes: int = 1

    def validate(self):
        unknown = [arm for arm in self.arms if arm not in ARMS]
        if unknown:
            raise InvalidConfig(f"unknown pipeline arms {unknown}; use any of {ARMS}")
        if not self.arms or len(set(self.arms)) != len(self.arms):
            raise InvalidConfig(f"pipeline.arms must be a non-empty list without repeats, got {self.arms}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise InvalidConfig(f"pipeline.seeds must be a non-empty list without repeats, got {self.seeds}")
        if self.num_processes < 1:
            raise InvalidConfig(f"pipeline.num_processes must be >= 1, got {self.num_processes}")
        return self


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    seed: Optional[int] = None

    def validate(self):
        self.data.validate()
        self.split.validate()
        self.pretrain.validate()
        self.adapt.validate()
        self.eval.validate()
        self.pipeline.validate()
        return self

    def with_seed(self, seed: int):
        """
        A copy whose stage seeds are all derived from one experiment seed.
        """
        stage_seeds = [int(s_) for s_ in np.random.SeedSequence(seed).generate_state(6)]
        new_config = parse_config(self.to_dict())
        new_config.seed = seed
        new_config.data.seed, new_config.split.seed, new_config.pretrain.seed, new_config.adapt.seed, \
            new_config.eval.seed, new_config.eval.probe.seed = stage_seeds
        return new_config

    def to_dict(self):
        config_dict = asdict(self)
        config_dict["adapt"] = self.adapt.to_dict()
        return config_dict


def _type_name(type_):
    return getattr(type_, "__name__", str(type_))


def _coerce(value, type_, where):
    origin = typing.get_origin(type_)
    if origin is Union:
        for option in typing.get_args(type_):
            if option is type(None):
                if value is None:
                    return None
                continue
            try:
                return _coerce(value, option, where)
            except InvalidConfig:
                pass
        raise InvalidConfig(f"{where}: {value!r} does not match {type_}")
    if origin is list:
        (item_type,) = typing.get_args(type_)
        if not isinstance(value, list):
            raise InvalidConfig(f"{where}: expected a list, got {value!r}")
        return [_coerce(item, item_type, f"{where}[{go_i}]") for go_i, item in enumerate(value)]
    if is_dataclass(type_):
        return _parse_section(type_, value, where)
    if type_ is bool:
        if not isinstance(value, bool):
            raise InvalidConfig(f"{where}: expected true/false, got {value!r}")
        return value
    if type_ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(f"{where}: expected an integer, got {value!r}")
        return value
    if type_ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"{where}: expected a number, got {value!r}")
        return float(value)
    if type_ is str:
        if not isinstance(value, str):
            raise InvalidConfig(f"{where}: expected a string, got {value!r}")
        return value
    raise InvalidConfig(f"{where}: unsupported field type {_type_name(type_)}")


def _parse_section(section_cls, section_dict, where):
    if not isinstance(section_dict, dict):
        raise InvalidConfig(f"{where}: expected an object, got {section_dict!r}")
    known = {f_.name: f_ for f_ in fields(section_cls)}
    hints = typing.get_type_hints(section_cls)
    kwargs = {}
    for key, value in section_dict.items():
        name = KEY_ALIASES.get(key, key)
        if name not in known:
            raise InvalidConfig(f"{where}: unknown key {key!r}")
        kwargs[name] = _coerce(value, hints[name], f"{where}.{key}")
    return section_cls(**kwargs)


def parse_config(config_dict) -> ExperimentConfig:
    return _parse_section(ExperimentConfig, config_dict, "config").validate()


def load_config(config_file: Optional[str] = None) -> ExperimentConfig:
    """defaults when no file is given"""
    if config_file is None:
        return ExperimentConfig().validate()
    if not os.path.isfile(config_file):
        raise IoError(f"Config file not found: {config_file}")
    with open(config_file, encoding="utf-8") as input_h:
        try:
            config_dict = json.load(input_h)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, line_number=e.lineno, path=config_file)
    return parse_config(config_dict)


__all__ = ["ExperimentConfig", "DataConfig", "SplitConfig", "ShiftConfig", "PipelineConfig", "TrainConfig",
           "AdaptConfig", "EvalConfig", "ProbeConfig", "parse_config", "load_config", "ARMS", "DEFAULT_ARMS"]
