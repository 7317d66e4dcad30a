"""Python bindings for the gazeclass library."""

import json
import os

from ._gazeclass import (  # noqa: F401
    ConfigError,
    Error,
    FormatError,
    Model,
    NumericError,
    ShapeError,
    __version__,
    analyze,
    augment10,
    build_hfm,
    hflip,
    kfold_plan,
    loocv_plan,
    lrp_dense,
    ranksum,
    roc_auc,
    silhouette,
    subject_score,
    tsne,
    verify,
)
from . import _gazeclass


def default_config():
    """Experiment config as a nested dict."""
    return json.loads(_gazeclass._default_config())


def normalize_config(config):
    """Fills defaults and validates; unknown keys raise ConfigError."""
    return json.loads(_gazeclass._normalize_config(json.dumps(config)))


def synth(config, out, force=False):
    return _gazeclass._synth(json.dumps(config), os.fspath(out), force)


def run(config, run_name, jobs=1, cache_dir=None):
    cache = None if cache_dir is None else os.fspath(cache_dir)
    return _gazeclass._run(json.dumps(config), run_name, jobs, cache)
