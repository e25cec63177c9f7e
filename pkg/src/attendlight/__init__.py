"""Attention-based universal traffic-signal controller with its own lane-level simulator."""

from __future__ import annotations

__version__ = "0.1.0"

from .flowgen import SYNTHETIC_PRESETS, FlowTrace, SyntheticParams, generate_synthetic
from .policy import AttendLight
from .simcore import SimConfig
from .topology import (
    Intersection,
    builtin_catalog,
    catalog_lookup,
    load_topology,
    parse_topology,
)
from .trainer import EnvInstance, RegimeConfig, evaluate, finetune, train

__all__ = [
    "SYNTHETIC_PRESETS",
    "AttendLight",
    "EnvInstance",
    "FlowTrace",
    "Intersection",
    "RegimeConfig",
    "SimConfig",
    "SyntheticParams",
    "builtin_catalog",
    "catalog_lookup",
    "evaluate",
    "finetune",
    "generate_synthetic",
    "load_topology",
    "parse_topology",
    "train",
]
