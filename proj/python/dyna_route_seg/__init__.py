# SPDX-License-Identifier: Apache-2.0
"""Slice-wise dynamic routing for volumetric segmentation."""

import json

from . import _core
from ._core import (
    ConfigError,
    DataError,
    ShapeError,
    candidate_flops,
    choice_label,
    decision_flops,
    dice_score,
    hd95,
)

__all__ = [
    "ConfigError",
    "DataError",
    "ShapeError",
    "candidate_flops",
    "choice_label",
    "config_hash",
    "decision_flops",
    "default_config",
    "dice_score",
    "hd95",
    "resolve_config",
    "run",
]


def _dump(config):
    if config is None:
        return ""
    return config if isinstance(config, str) else json.dumps(config)


def default_config():
    return json.loads(_core.default_config_json())


def resolve_config(config):
    """Fill a partial config dict with defaults and validate it."""
    return json.loads(_core.resolve_config(_dump(config)))


def config_hash(config=None):
    return _core.config_hash(_dump(config))


def run(command, config=None, out_dir="", force_decision=None, oracle_routing=False):
    """Run one pipeline command. Returns (exit_code, summary dict)."""
    code, summary = _core.run_command(command, _dump(config), str(out_dir), force_decision, oracle_routing)
    return code, json.loads(summary)
