"""Python bindings for the dito detection pipeline."""

import json

from ._dito import ensemble_score, info_nce, nms, roi_align, shift_size
from . import _dito

__all__ = ["default_config", "run_stage", "ablate", "ensemble_score", "info_nce", "nms", "roi_align", "shift_size"]

STAGES = ("gen-data", "pretrain-clip", "pretrain-dop", "finetune", "evaluate")


def default_config():
    """Built-in configuration as a nested dict."""
    return json.loads(_dito.default_config())


def _overrides(overrides):
    return [f"{k}={json.dumps(v)}" for k, v in (overrides or {}).items()]


def run_stage(stage, out, config=None, overrides=None):
    """Run one pipeline stage under `out`; returns its metrics dict."""
    return _dito.run_stage(stage, str(out), json.dumps(config) if config else "", _overrides(overrides))


def ablate(out, config=None, overrides=None, threads=1):
    """Run the DOP x SWL ablation grid; returns the aggregated metrics dict."""
    return _dito.ablate(str(out), json.dumps(config) if config else "", _overrides(overrides), threads)
