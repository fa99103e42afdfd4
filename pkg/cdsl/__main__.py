#! /usr/bin/env python

"""
Command-line Interface to cdsl
"""
import time
time_zero = time.time()
import os, sys, platform
from contextlib import contextmanager
from pathlib import Path
from enum import Enum
from typing import Optional

import typer
import yaml
from loguru import logger

from cdsl import __version__
from cdsl.utils import setup_logger, log_level_from_env, CDSError, EXIT_IO


# add the -h option for showing help
CONTEXT_SETTINGS = dict(help_option_names=['-h', '--help'])
RUNNING_HEAD = f"cdsl (v.{__version__}): cross-domain self-supervised pre-training and adaptation"
LOG_FILE = "cdsl.log.txt"
OPTIONS_YAML = "options.yaml"


def running_env_info():
    return "\n" \
           "Python " + str(sys.version).replace("\n", " ") + "\n" + \
           "PLATFORM:  " + " ".join(platform.uname()) + "\n" + \
           "WORKDIR:   " + os.getcwd() + "\n" + \
           "COMMAND:   " + " ".join(["\"" + arg + "\"" if " " in arg else arg for arg in sys.argv]) + \
           "\n"


# creates the top-level cdsl app
app = typer.Typer(add_completion=False, context_settings=CONTEXT_SETTINGS)


def version_callback(value: bool):
    """Adding a --version option to the CLI"""
    if value:
        typer.echo(f"cdsl {__version__}")
        raise typer.Exit()


@app.callback()
def main(
        version: bool = typer.Option(None, "--version", "-v", callback=version_callback, is_eager=True,
                                     help="print version and exit."),
    ):
    """
    Call cdsl commands to generate data, pre-train, adapt and evaluate,
    and cdsl COMMAND -h to see help options for each tool
    (e.g., cdsl pretrain -h)
    """
    typer.secho(RUNNING_HEAD, fg=typer.colors.MAGENTA, bold=True)


# ================== logging options to yaml ==================
# to ensure that Path and Enum objects are properly serialized to YAML.
def custom_representer(dumper, data):
    return dumper.represent_scalar('tag:yaml.org,2002:str', str(data))

yaml.add_multi_representer(Path, custom_representer)
yaml.add_multi_representer(Enum, custom_representer)


def write_options_to_yaml(command_options: dict, config_dict: dict, yaml_file):
    """
    Write the command-line options and the resolved experiment configuration to a YAML file.
    """
    options = {}
    for key, value in command_options.items():
        options[key] = str(value) if isinstance(value, (Path, Enum)) else value
    with open(yaml_file, 'w') as f:
        yaml.dump({"command": options, "config": config_dict}, f,
                  default_flow_style=False)  # add to produce human-readable YAML
# ================== logging options to yaml ends ==================


def initialize(output_dir: Path):
    """
    create the output directory, log head and running environment
    """
    os.makedirs(str(output_dir), exist_ok=True)
    logfile = os.path.join(output_dir, LOG_FILE)
    loglevel = log_level_from_env()
    # avoid repeating RUNNING_HEAD in the screen output by typer.secho
    setup_logger(loglevel=loglevel, timed=False, log_file=logfile, screen_out=None)
    logger.info(RUNNING_HEAD)
    logger.info(running_env_info())
    setup_logger(loglevel=loglevel, timed=True, log_file=logfile, screen_out=sys.stderr)


@contextmanager
def command_boundary():
    """map package errors to exit codes"""
    try:
        yield
    except CDSError as e:
        logger.error(f"{type(e).__name__}: {e}")
        raise typer.Exit(code=e.exit_code)
    except OSError as e:
        logger.error(f"{type(e).__name__}: {e}")
        raise typer.Exit(code=EXIT_IO)
    logger.info("Total cost %.4f" % (time.time() - time_zero))


def prepare(config_file: Optional[Path], output_dir: Path, seed_override: Optional[int], command_options: dict):
    from cdsl.ExperimentConfig import load_config
    initialize(output_dir)
    config = load_config(None if config_file is None else str(config_file))
    if seed_override is not None:
        config = config.with_seed(seed_override)
    write_options_to_yaml(command_options, config.to_dict(), output_dir.joinpath(OPTIONS_YAML))
    return config


CONFIG_OPTION = typer.Option(
    None, "-c", "--config",
    help="JSON experiment configuration. Defaults are used for anything left out.",
    resolve_path=True)
OUT_OPTION = typer.Option(
    './', "-o", "--out",
    help="Output directory",
    exists=False, resolve_path=True)
SEED_OPTION = typer.Option(
    None, "--seed-override",
    help="Derive every stage seed from this experiment seed.")


@app.command("gen-data")
def gen_data(
        config_file: Optional[Path] = CONFIG_OPTION,
        output_dir: Path = OUT_OPTION,
        seed_override: Optional[int] = SEED_OPTION,
    ):
    """
    Generate the synthetic two-domain dataset and its few-label split.
    Examples:
    cdsl gen-data -c exp.json -o data/
    """
    with command_boundary():
        config = prepare(config_file, output_dir, seed_override, locals())
        from cdsl.Pipeline import gen_data_stage
        gen_data_stage(config, str(output_dir))


@app.command()
def pretrain(
        config_file: Optional[Path] = CONFIG_OPTION,
        output_dir: Path = OUT_OPTION,
        seed_override: Optional[int] = SEED_OPTION,
        resume_dir: Optional[Path] = typer.Option(
            None, "--resume",
            help="A previous pretrain output directory (model, banks and optimizer state) to continue from. "
                 "Training continues up to pretrain.epochs.",
            resolve_path=True),
    ):
    """
    Self-supervised pre-training of the encoder with the memory-bank objective.
    Examples:
    cdsl pretrain -c exp.json -o pretrain/
    """
    with command_boundary():
        config = prepare(config_file, output_dir, seed_override, locals())
        from cdsl.Pipeline import load_split, pretrain_stage
        split = load_split(config)
        logger.info(split.summary())
        pretrain_stage(config, split, str(output_dir), resume_dir=None if resume_dir is None else str(resume_dir))


@app.command()
def adapt(
        config_file: Optional[Path] = CONFIG_OPTION,
        output_dir: Path = OUT_OPTION,
        seed_override: Optional[int] = SEED_OPTION,
        model_file: Optional[Path] = typer.Option(
            None, "-m", "--model",
            help="Encoder JSON to start from (e.g. model.json of cdsl pretrain). "
                 "A freshly initialized encoder is used when omitted.",
            resolve_path=True),
    ):
    """
    Train the classifier (and fine-tune the encoder) on the few labeled source samples.
    Examples:
    cdsl adapt -c exp.json -m pretrain/model.json -o adapt/
    """
    with command_boundary():
        config = prepare(config_file, output_dir, seed_override, locals())
        from cdsl.Encoder import EncoderModel
        from cdsl.Pipeline import load_split, adapt_stage
        split = load_split(config)
        if model_file is None:
            model = EncoderModel.initialize(split.input_dim, config.pretrain.hidden, config.pretrain.d,
                                            seed=config.pretrain.seed)
        else:
            model = EncoderModel.load(str(model_file))
        adapt_stage(config, split, model, str(output_dir))


@app.command("eval")
def evaluate(
        config_file: Optional[Path] = CONFIG_OPTION,
        output_dir: Path = OUT_OPTION,
        seed_override: Optional[int] = SEED_OPTION,
        model_file: Optional[Path] = typer.Option(
            None, "-m", "--model",
            help="Encoder JSON whose features are evaluated. "
                 "Without it the data vectors themselves are evaluated as features.",
            resolve_path=True),
    ):
    """
    Weighted kNN, linear probe, retrieval precision and confusion loss of frozen features.
    Examples:
    cdsl eval -c exp.json -m pretrain/model.json -o eval/
    """
    with command_boundary():
        config = prepare(config_file, output_dir, seed_override, locals())
        from cdsl.Encoder import EncoderModel
        from cdsl.Pipeline import load_split, eval_stage
        split = load_split(config)
        model = None if model_file is None else EncoderModel.load(str(model_file))
        eval_stage(config, split, model, str(output_dir))


@app.command()
def pipeline(
        config_file: Optional[Path] = CONFIG_OPTION,
        output_dir: Path = OUT_OPTION,
        seed_override: Optional[int] = SEED_OPTION,
        num_processes: Optional[int] = typer.Option(
            None, "-p", "--processes",
            help="Num of processes. Overrides pipeline.num_processes."),
    ):
    """
    Compare pre-training arms over the configured seeds, each followed by the same evaluation and adaptation.
    Examples:
    cdsl pipeline -c exp.json -o comparison/
    """
    with command_boundary():
        config = prepare(config_file, output_dir, seed_override, locals())
        from cdsl.Pipeline import ExperimentPipeline
        ExperimentPipeline(config, str(output_dir), num_processes=num_processes).run()


if __name__ == "__main__":
    app()
