"""Continual source-free adaptation under gradually degrading weather."""

import json

from . import _core
from ._core import (
    ConfigError,
    DriftAdaptError,
    InputError,
    IoError,
    NumericError,
    ValidationError,
    diversity_loss,
    entropy_loss,
    equal_diversity_loss,
    lr_at,
    make_shapes,
    prototypical_contrastive_loss,
    pseudolabel_ce,
    refine_pseudolabels,
)

__all__ = [
    "ConfigError",
    "DriftAdaptError",
    "InputError",
    "IoError",
    "NumericError",
    "ValidationError",
    "adapt",
    "default_config",
    "default_schedule",
    "degrade",
    "diversity_loss",
    "entropy_loss",
    "equal_diversity_loss",
    "lr_at",
    "make_shapes",
    "prototypical_contrastive_loss",
    "pseudolabel_ce",
    "refine_pseudolabels",
    "report",
    "synthesize",
    "train_source",
]


def _dump(config):
    return config if isinstance(config, str) else json.dumps(config)


def default_config():
    return json.loads(_core.default_config())


def default_schedule(kind, seed=0):
    return json.loads(_core.default_schedule(kind, seed))


def degrade(image, schedule, level, image_id=0):
    return _core.degrade(image, _dump(schedule), level, image_id)


def synthesize(config):
    return _core.synthesize(_dump(config))


def train_source(config):
    return _core.train_source(_dump(config))


def adapt(config, resume=False, quiet=True):
    return _core.adapt(_dump(config), resume, quiet)


def report(results):
    return _core.report([str(p) for p in results])
