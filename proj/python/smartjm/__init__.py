"""Joint longitudinal-survival evaluation of SMART regimens.

Configuration dictionaries use the same keys as the command-line study
config; omitted keys take their defaults.
"""

import json

import numpy as np

from . import _core
from ._core import (
    ConfigError,
    Dataset,
    Error,
    EstimationError,
    EvaluationError,
    FitError,
    ParseError,
    PreconditionError,
)

__all__ = [
    "ConfigError", "Dataset", "Error", "EstimationError", "EvaluationError", "FitError",
    "ParseError", "PreconditionError", "config", "fit", "gformula", "iptw", "load", "mcb",
    "run_replication", "simulate", "true_values",
]


def _text(config):
    return json.dumps(config or {})


def config(config=None):
    """The full configuration with defaults filled in, plus its hash."""
    return json.loads(_core.normalize_config(_text(config)))


def simulate(config=None):
    return _core.simulate(_text(config))


def load(subjects, longitudinal, config=None):
    return _core.load(str(subjects), str(longitudinal), _text(config))


def fit(data, config=None):
    return json.loads(_core.fit(data, _text(config)))


def gformula(data, config=None):
    return json.loads(_core.gformula(data, _text(config)))


def iptw(data, config=None):
    return json.loads(_core.iptw(data, _text(config)))


def mcb(values, cov, zeta=0.05, n_mc=20000, seed=1):
    values = np.asarray(values, dtype=float)
    cov = np.asarray(cov, dtype=float)
    return _core.mcb(values, cov, zeta, n_mc, seed)


def true_values(config=None):
    return json.loads(_core.true_values(_text(config)))


def run_replication(index, config=None):
    return json.loads(_core.run_replication(index, _text(config)))
