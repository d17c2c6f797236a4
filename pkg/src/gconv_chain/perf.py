"""Analytic cycle and data-movement model for unroll plans.

Counts are in data elements.  A level's movement is the number of tile
refills (the trip product of temporal entries outside the level's pointer)
times the spatial footprint times the per-PE tile footprint inside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .accel import DATA_CLASSES, GB_LEVELS, LS_LEVELS, UnrollPlan, footprint
from .errors import DependencyError

LEVELS = ("LS", "GB")


def _ceil_div(a, b):
    return -(-a // b)


def cycles(plan: UnrollPlan) -> int:
    """Product over loops of ceil(trip / composed spatial factor)."""
    sp: dict = {}
    for e in plan.spatial_entries:
        sp[(e.dim, e.param)] = sp.get((e.dim, e.param), 1) * e.factor
    n = 1
    for key, trip in plan.loops:
        n *= _ceil_div(trip, sp.get(key, 1))
    return n


def tile_footprint(entries, data_class: str, strides=()) -> int:
    return footprint(entries, data_class, strides)


def _pointer_name(level: str, data_class: str | None) -> tuple[str, str]:
    if level in LS_LEVELS:
        cls = LS_LEVELS[level]
        if data_class not in (None, cls):
            raise ValueError(f"{level} holds {cls} data, not {data_class}")
        return level, cls
    if level in ("GB", "global_buffer"):
        if data_class not in DATA_CLASSES:
            raise ValueError("global buffer movement needs a data class")
        return f"GB_{data_class}", data_class
    raise ValueError(f"unknown memory level {level!r}")


def level_movement(plan: UnrollPlan, level: str, data_class: str | None = None) -> int:
    """Elements moved into ``level`` (ILS, KLS, OLS or GB) for ``data_class``."""
    ptr_name, cls = _pointer_name(level, data_class)
    if cls == "kernel" and not plan.has_kernel:
        return 0
    ptr = plan.pointers[ptr_name]
    refills = 1
    for e in plan.temporal[ptr + 1:]:
        refills *= e.factor
    sp = footprint(plan.spatial_entries, cls, plan.strides)
    tp = footprint(plan.temporal[:ptr + 1], cls, plan.strides)
    return refills * sp * tp


def compulsory(plan: UnrollPlan, data_class: str) -> int:
    """Distinct elements of ``data_class`` touched by the whole plan."""
    if data_class == "kernel" and not plan.has_kernel:
        return 0
    return footprint(plan.spatial_entries + list(plan.temporal), data_class, plan.strides)


@dataclass
class NodePerf:
    cycles: int
    movement: dict   # level -> data class -> elements
    compulsory: dict

    def to_dict(self):
        return {"cycles": self.cycles, "movement": self.movement,
                "compulsory": self.compulsory}


@dataclass
class PerfReport:
    nodes: dict
    accelerator: str = ""
    stats: dict = field(default_factory=dict)

    @property
    def total_cycles(self) -> int:
        return sum(n.cycles for n in self.nodes.values())

    def total_movement(self, level: str | None = None, data_class: str | None = None) -> int:
        t = 0
        for n in self.nodes.values():
            for lv, per in n.movement.items():
                if level not in (None, lv):
                    continue
                for c, v in per.items():
                    if data_class in (None, c):
                        t += v
        return t

    def to_dict(self) -> dict:
        return {
            "accelerator": self.accelerator,
            "nodes": {k: v.to_dict() for k, v in self.nodes.items()},
            "totals": {
                "cycles": self.total_cycles,
                "movement": {lv: {c: self.total_movement(lv, c) for c in DATA_CLASSES}
                             for lv in LEVELS},
            },
            "stats": self.stats,
        }


def analyze_plan(plan: UnrollPlan) -> NodePerf:
    ls = {cls: level_movement(plan, lv) for lv, cls in LS_LEVELS.items()}
    gb = {cls: level_movement(plan, "GB", cls) for cls in GB_LEVELS.values()}
    return NodePerf(cycles(plan), {"LS": ls, "GB": gb},
                    {c: compulsory(plan, c) for c in DATA_CLASSES})


def analyze_chain(chain, plans: dict, accel=None) -> PerfReport:
    nodes = {}
    for g in chain.nodes:
        if g.id not in plans:
            raise DependencyError(f"no unroll plan for {g.id!r}")
        nodes[g.id] = analyze_plan(plans[g.id])
    return PerfReport(nodes, accel.name if accel is not None else "")
