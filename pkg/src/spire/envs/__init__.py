"""Bundled desk-scale domains and the domain catalog."""

from __future__ import annotations

import re

from ..errors import UnknownDomain
from .base import Environment
from .expert import ScriptedExpert
from .gridchain import GridChain, GridState
from .pointchain import PointChain
from .synthetic import ChainState, SyntheticChain

BROAD_RADIUS = 0.35

__all__ = [
    "Environment",
    "GridChain",
    "GridState",
    "PointChain",
    "SyntheticChain",
    "ChainState",
    "ScriptedExpert",
    "make_env",
    "DOMAINS",
]

DOMAINS = ("GridChain-k", "PointChain-k", "PointChain-k-broad", "Synthetic")


def make_env(name: str, **params) -> Environment:
    """Build a domain from its catalog name, e.g. ``"GridChain-2"`` or ``"PointChain-1-broad"``."""
    m = re.fullmatch(r"GridChain-(\d+)", name)
    if m:
        return GridChain(k=int(m.group(1)), **params)
    m = re.fullmatch(r"PointChain-(\d+)(-broad)?", name)
    if m:
        if m.group(2):
            params.setdefault("init_radius", BROAD_RADIUS)
        return PointChain(k=int(m.group(1)), **params)
    if re.fullmatch(r"Synthetic(-\d+)?", name):
        return SyntheticChain(**params)
    raise UnknownDomain(f"unknown domain {name!r}; known: {', '.join(DOMAINS)}")


def task_from_config(cfg: dict):
    """Rebuild a TaskSpec from ``TaskSpec.to_config()`` output."""
    params = dict(cfg.get("params", {}))
    params.pop("k", None)
    limits = cfg.get("step_limits")
    if limits:
        params["step_limit"] = limits[0]
    params["discount"] = cfg.get("discount", 0.99)
    name = cfg["domain"]
    if name.startswith("PointChain"):
        name = re.sub(r"-broad$", "", name)
    return make_env(name, **params).task
