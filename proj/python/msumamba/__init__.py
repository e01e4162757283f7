# Copyright (c) 2026 The msumamba Authors
# SPDX-License-Identifier: Apache-2.0
"""Python interface to the msumamba segmentation core."""

import json

from . import _core
from ._core import (
    CheckpointError,
    ConfigError,
    ContractViolation,
    DataError,
    Error,
    EvaluationError,
    InputError,
    NumericError,
    TrainingAborted,
    gradcheck_names,
    oracle_names,
    phantom,
    synthesize,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractViolation",
    "DataError",
    "Error",
    "EvaluationError",
    "InputError",
    "Model",
    "NumericError",
    "Trainer",
    "TrainingAborted",
    "default_run_config",
    "gradcheck_names",
    "metrics",
    "oracle_names",
    "phantom",
    "synthesize",
    "validate_run_config",
    "verify",
]


def default_run_config():
    return json.loads(_core.default_run_config())


def validate_run_config(config):
    _core.validate_run_config(json.dumps(config))


def metrics(pred, gt, num_classes=7):
    return json.loads(_core.metrics(pred, gt, num_classes))


def verify(suite, only=(), trials=20, seed=2024):
    return json.loads(_core.verify(suite, list(only), trials, seed))


class Model:
    def __init__(self, native):
        self._m = native

    @classmethod
    def from_config(cls, config):
        return cls(_core.Model.from_config(json.dumps(config)))

    @classmethod
    def load(cls, path):
        return cls(_core.Model.load(str(path)))

    def save(self, path):
        self._m.save(str(path))

    def forward(self, images):
        return self._m.forward(images)

    def predict(self, image, pad_to_32=False):
        return self._m.predict(image, pad_to_32)

    def evaluate(self, data, threads=1):
        return json.loads(self._m.evaluate(str(data), threads))

    @property
    def config(self):
        return json.loads(self._m.config_json)

    @property
    def num_parameters(self):
        return self._m.num_parameters

    @property
    def parameter_names(self):
        return self._m.parameter_names


class Trainer:
    def __init__(self, config, resume=None):
        self._t = _core.Trainer(json.dumps(config), None if resume is None else str(resume))

    def run(self, stop_after=-1):
        steps, finished = self._t.run(stop_after)
        return steps, finished

    @property
    def steps_done(self):
        return self._t.steps_done

    @property
    def total_steps(self):
        return self._t.total_steps

    @property
    def model(self):
        return Model(self._t.model())
