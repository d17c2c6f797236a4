"""Accelerator descriptions and the GCONV-to-unrolling mapper.

A plan assigns every loop ``(param, dim)`` of a GConv to spatial entries (one
list per PE-array dimension) and temporal entries.  The temporal list is
ordered innermost first; each spatial list is ordered outermost first, so its
last entries are the ones that set the output storage format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .core import PARAMS, SCAN_DIMS, GConv, has_overlap
from .errors import ParseError

DATA_CLASSES = ("input", "kernel", "output")
LS_LEVELS = {"ILS": "input", "KLS": "kernel", "OLS": "output"}
GB_LEVELS = {"GB_input": "input", "GB_kernel": "kernel", "GB_output": "output"}
POINTERS = tuple(LS_LEVELS) + tuple(GB_LEVELS)

# data classes whose tile footprint grows with each parameter
GROWS = {
    "g": ("input", "kernel", "output"),
    "op": ("kernel", "output"),
    "ks": ("input", "kernel"),
    "opc": ("input", "output"),
}


@dataclass(frozen=True)
class SpatialDim:
    label: str
    size: int
    can_reduce: bool = False
    priority: tuple = ("opc", "op", "ks", "g")


@dataclass(frozen=True)
class OverlapPrimitive:
    kind: str  # "spatial" or "temporal"
    ks_dim: str | None = None
    opc_dim: str | None = None


@dataclass(frozen=True)
class AcceleratorSpec:
    name: str
    spatial: tuple
    scratchpads: dict
    global_buffer: dict
    bandwidth: dict = field(default_factory=dict)
    overlap_primitives: tuple = ()
    temporal_priority: tuple = ("op", "ks", "opc", "g")
    remainder_priority: tuple = ("opc", "op", "ks", "g")
    output_format_dim: str | None = None
    element_bytes: int = 2

    @property
    def total_pes(self) -> int:
        n = 1
        for sd in self.spatial:
            n *= sd.size
        return n

    def spatial_dim(self, label) -> SpatialDim:
        for sd in self.spatial:
            if sd.label == label:
                return sd
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "spatial": [{"label": s.label, "size": s.size, "can_reduce": s.can_reduce,
                         "priority": list(s.priority)} for s in self.spatial],
            "scratchpads": dict(self.scratchpads),
            "global_buffer": dict(self.global_buffer),
            "bandwidth": dict(self.bandwidth),
            "overlap_primitives": [
                {k: v for k, v in (("kind", p.kind), ("ks_dim", p.ks_dim),
                                   ("opc_dim", p.opc_dim)) if v is not None}
                for p in self.overlap_primitives],
            "temporal_priority": list(self.temporal_priority),
            "remainder_priority": list(self.remainder_priority),
            "output_format_dim": self.output_format_dim,
            "element_bytes": self.element_bytes,
        }


def check_accelerator(acc: AcceleratorSpec) -> list[str]:
    v = []
    labels = [s.label for s in acc.spatial]
    if not labels:
        v.append("at least one spatial dimension is required")
    if len(set(labels)) != len(labels):
        v.append("duplicate spatial dimension label")
    for s in acc.spatial:
        if s.size < 1:
            v.append(f"spatial dimension {s.label}: size must be >= 1")
        if set(s.priority) - set(PARAMS):
            v.append(f"spatial dimension {s.label}: unknown parameter in priority")
    for c in DATA_CLASSES:
        if acc.scratchpads.get(c, 0) < 1:
            v.append(f"scratchpad for {c} must hold >= 1 element")
        if acc.global_buffer.get(c, 0) < 1:
            v.append(f"global buffer for {c} must hold >= 1 element")
    for p in acc.overlap_primitives:
        if p.kind not in ("spatial", "temporal"):
            v.append(f"overlap primitive kind {p.kind!r}")
        for lab in (p.ks_dim, p.opc_dim):
            if lab is not None and lab not in labels:
                v.append(f"overlap primitive refers to unknown dimension {lab!r}")
    if acc.output_format_dim is not None and acc.output_format_dim not in labels:
        v.append(f"output_format_dim {acc.output_format_dim!r} is not a spatial dimension")
    return v


ACCEL_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "GCONV chain accelerator description",
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "spatial", "scratchpads", "global_buffer"],
    "properties": {
        "name": {"type": "string"},
        "spatial": {"type": "array", "minItems": 1, "items": {
            "type": "object", "additionalProperties": False,
            "required": ["label", "size"],
            "properties": {
                "label": {"type": "string"},
                "size": {"type": "integer", "minimum": 1},
                "can_reduce": {"type": "boolean"},
                "priority": {"type": "array", "items": {"enum": list(PARAMS)}},
            }}},
        "scratchpads": {"$ref": "#/$defs/per_class"},
        "global_buffer": {"$ref": "#/$defs/per_class"},
        "bandwidth": {"$ref": "#/$defs/per_class"},
        "overlap_primitives": {"type": "array", "items": {
            "type": "object", "additionalProperties": False, "required": ["kind"],
            "properties": {"kind": {"enum": ["spatial", "temporal"]},
                           "ks_dim": {"type": "string"}, "opc_dim": {"type": "string"}}}},
        "temporal_priority": {"type": "array", "items": {"enum": list(PARAMS)}},
        "remainder_priority": {"type": "array", "items": {"enum": list(PARAMS)}},
        "output_format_dim": {"type": ["string", "null"]},
        "element_bytes": {"type": "integer", "minimum": 1},
        "notes": {"type": "string"},
    },
    "$defs": {"per_class": {
        "type": "object", "additionalProperties": False,
        "required": list(DATA_CLASSES),
        "properties": {c: {"type": "integer", "minimum": 1} for c in DATA_CLASSES}}},
}


def accelerator_from_dict(doc: dict) -> AcceleratorSpec:
    import jsonschema

    try:
        jsonschema.validate(doc, ACCEL_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ParseError(e.message, e.json_path) from None
    acc = AcceleratorSpec(
        name=doc["name"],
        spatial=tuple(SpatialDim(s["label"], s["size"], s.get("can_reduce", False),
                                 tuple(s.get("priority", ("opc", "op", "ks", "g"))))
                      for s in doc["spatial"]),
        scratchpads=dict(doc["scratchpads"]),
        global_buffer=dict(doc["global_buffer"]),
        bandwidth=dict(doc.get("bandwidth", {})),
        overlap_primitives=tuple(OverlapPrimitive(p["kind"], p.get("ks_dim"), p.get("opc_dim"))
                                 for p in doc.get("overlap_primitives", ())),
        temporal_priority=tuple(doc.get("temporal_priority", ("op", "ks", "opc", "g"))),
        remainder_priority=tuple(doc.get("remainder_priority", ("opc", "op", "ks", "g"))),
        output_format_dim=doc.get("output_format_dim"),
        element_bytes=doc.get("element_bytes", 2),
    )
    bad = check_accelerator(acc)
    if bad:
        raise ParseError("; ".join(bad), "$")
    return acc


PRESETS = ("tpu", "dnnweaver", "eyeriss", "eagerpruning", "nlr")


def load_accelerator(name_or_path) -> AcceleratorSpec:
    """Load a shipped preset by name or an accelerator JSON document by path."""
    key = str(name_or_path).lower()
    if key in PRESETS:
        text = resources.files("gconv_chain").joinpath("presets").joinpath(f"{key}.json").read_text()
    else:
        p = Path(name_or_path)
        if not p.exists():
            raise ParseError(f"no preset or file named {name_or_path!r}")
        text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e}") from None
    return accelerator_from_dict(doc)


# --- plans -------------------------------------------------------------------

@dataclass(frozen=True)
class UnrollEntry:
    param: str
    dim: str
    factor: int

    def __iter__(self):
        return iter((self.param, self.dim, self.factor))

    def __repr__(self):
        return f"[{self.param},{self.dim},{self.factor}]"


@dataclass(frozen=True)
class UnrollPlan:
    spatial: tuple            # ((label, (entries...)), ...) in accelerator order
    temporal: tuple           # innermost first
    pointers: dict            # pointer name -> last index inside (-1: none)
    loops: tuple              # (((dim, param), trip), ...) for trips > 1
    strides: tuple            # ((dim, stride), ...)
    has_kernel: bool = True
    n_primitive: int = 0
    remainder_start: int = 0
    output_format_dim: str | None = None

    @property
    def pyt(self) -> int:
        return len(self.spatial[0][1]) if self.spatial else 0

    @property
    def ilst(self) -> int:
        return self.pointers["ILS"]

    @property
    def klst(self) -> int:
        return self.pointers["KLS"]

    @property
    def olst(self) -> int:
        return self.pointers["OLS"]

    def spatial_list(self, label) -> tuple:
        return dict(self.spatial)[label]

    @property
    def spatial_entries(self) -> list:
        return [e for _, es in self.spatial for e in es]

    def trip(self, dim, param) -> int:
        return dict(self.loops).get((dim, param), 1)

    def stride(self, dim) -> int:
        return dict(self.strides).get(dim, 1)

    def is_empty(self) -> bool:
        return not self.temporal and not any(es for _, es in self.spatial)


def footprint(entries, data_class: str, strides) -> int:
    """Table-3 element count touched by a set of unroll entries.

    For inputs the per-dimension term is Pg*(Pks + s*(Popc - 1)), capped at
    Pg*Pks*Popc when windows do not overlap (s > Pks).
    """
    strides = dict(strides)
    acc: dict = {}
    for p, d, f in entries:
        acc.setdefault(d, {"g": 1, "op": 1, "ks": 1, "opc": 1})[p] *= f
    total = 1
    for d, f in acc.items():
        if data_class == "input":
            s = strides.get(d, 1)
            span = f["ks"] + s * (f["opc"] - 1)
            total *= f["g"] * min(span, f["ks"] * f["opc"])
        elif data_class == "kernel":
            total *= f["g"] * f["op"] * f["ks"]
        elif data_class == "output":
            total *= f["g"] * f["op"] * f["opc"]
        else:
            raise ValueError(f"unknown data class {data_class!r}")
    return total


def _ceil_div(a, b):
    return -(-a // b)


def alloc_factor(remaining_resource: int, trip: int) -> tuple[int, int, int]:
    """(factor, new trip, new resource) for one unrolling step."""
    uf = min(remaining_resource, trip)
    return uf, _ceil_div(trip, uf), remaining_resource // uf


def compute_pointers(temporal, spatial_entries, strides, acc: AcceleratorSpec,
                     has_kernel=True) -> dict:
    ptrs = {}
    for level, cls in LS_LEVELS.items():
        ptrs[level] = _fit_prefix(temporal, cls, strides, acc.scratchpads[cls], 1)
    for level, cls in GB_LEVELS.items():
        sp = footprint(spatial_entries, cls, strides)
        ptrs[level] = _fit_prefix(temporal, cls, strides, acc.global_buffer[cls], sp)
    return ptrs


def _fit_prefix(temporal, cls, strides, cap, mult) -> int:
    last = -1
    for i in range(len(temporal)):
        if mult * footprint(temporal[:i + 1], cls, strides) <= cap:
            last = i
        else:
            break
    return last


def _g_last(order) -> tuple:
    return tuple(p for p in order if p != "g") + (("g",) if "g" in order else ())


class _Mapper:
    def __init__(self, g: GConv, acc: AcceleratorSpec):
        self.acc = acc
        self.dims = [d for d in SCAN_DIMS if d in g.dim_names]
        self.loops = {(d, p): g.dim(d).trip(p) for d in self.dims for p in PARAMS}
        self.rem = dict(self.loops)
        self.strides = {d: g.dim(d).s for d in self.dims}
        self.res = {sd.label: sd.size for sd in acc.spatial}
        self.spatial = {sd.label: [] for sd in acc.spatial}
        self.temporal = []
        self.has_kernel = g.kernel_ref is not None and g.ops.main.name not in (
            "identity", "square_of_input")
        self.classes = DATA_CLASSES if self.has_kernel else ("input", "output")
        self.gconv = g

    def spatial_step(self, label, p, d):
        trip = self.rem[(d, p)]
        if trip <= 1 or self.res[label] <= 1:
            return
        uf, self.rem[(d, p)], self.res[label] = alloc_factor(self.res[label], trip)
        if uf > 1:
            self.spatial[label].append(UnrollEntry(p, d, uf))

    def temporal_fit(self, p, d) -> int:
        """Largest factor keeping every grown scratchpad tile within capacity."""
        trip = self.rem[(d, p)]
        grown = [c for c in GROWS[p] if c in self.classes]
        caps = self.acc.scratchpads
        for c in grown:
            if footprint(self.temporal, c, self.strides) > caps[c]:
                return 1

        def fits(uf):
            t = self.temporal + [UnrollEntry(p, d, uf)]
            return all(footprint(t, c, self.strides) <= caps[c] for c in grown)

        lo, hi = 1, trip
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if fits(mid):
                lo = mid
            else:
                hi = mid - 1
        return lo

    def temporal_step(self, p, d):
        trip = self.rem[(d, p)]
        if trip <= 1:
            return
        uf = self.temporal_fit(p, d)
        if uf > 1:
            self.temporal.append(UnrollEntry(p, d, uf))
            self.rem[(d, p)] = _ceil_div(trip, uf)

    def overlap_phase(self):
        odims = [d for d in self.dims if has_overlap(self.gconv.dim(d))]
        prims = list(self.acc.overlap_primitives)
        # with fewer overlap dims than primitives, spatial primitives win
        while len(prims) > len(odims):
            t = [i for i, q in enumerate(prims) if q.kind == "temporal"]
            prims.pop(t[-1] if t else len(prims) - 1)
        for d, prim in zip(odims, prims):
            if prim.kind == "spatial":
                if prim.ks_dim is not None:
                    self.spatial_step(prim.ks_dim, "ks", d)
                if prim.opc_dim is not None:
                    self.spatial_step(prim.opc_dim, "opc", d)
            else:
                self.temporal_step("ks", d)
                trip = self.rem[(d, "opc")]
                if trip > 1:
                    self.temporal.append(UnrollEntry("opc", d, trip))
                    self.rem[(d, "opc")] = 1

    def run(self) -> UnrollPlan:
        self.overlap_phase()
        n_prim = len(self.temporal)
        for sd in self.acc.spatial:
            for p in _g_last(sd.priority):
                for d in self.dims:
                    self.spatial_step(sd.label, p, d)
        for p in _g_last(self.acc.temporal_priority):
            for d in self.dims:
                self.temporal_step(p, d)
        rem_start = len(self.temporal)
        for p in _g_last(self.acc.remainder_priority):
            for d in self.dims:
                if self.rem[(d, p)] > 1:
                    self.temporal.append(UnrollEntry(p, d, self.rem[(d, p)]))
                    self.rem[(d, p)] = 1
        spatial = tuple((sd.label, tuple(self.spatial[sd.label])) for sd in self.acc.spatial)
        temporal = tuple(self.temporal)
        sp_entries = [e for _, es in spatial for e in es]
        strides = tuple(sorted(self.strides.items()))
        return UnrollPlan(
            spatial=spatial,
            temporal=temporal,
            pointers=compute_pointers(temporal, sp_entries, strides, self.acc, self.has_kernel),
            loops=tuple(sorted((k, v) for k, v in self.loops.items() if v > 1)),
            strides=strides,
            has_kernel=self.has_kernel,
            n_primitive=n_prim,
            remainder_start=rem_start,
            output_format_dim=self.acc.output_format_dim,
        )


def map_gconv(g: GConv, acc: AcceleratorSpec) -> UnrollPlan:
    """Greedy unrolling: overlap primitives, spatial fill, scratchpad fill, remainder."""
    return _Mapper(g, acc).run()


def map_chain(chain, acc: AcceleratorSpec) -> dict:
    return {g.id: map_gconv(g, acc) for g in chain.nodes}


# --- plan invariants ---------------------------------------------------------

def covers(trip: int, factors) -> bool:
    """Factors ceil-cover ``trip`` exactly: the chain reaches 1, no factor is idle."""
    prod = 1
    for f in factors:
        prod *= f
    if trip <= 1:
        return not factors
    return prod >= trip and all(prod // f < trip for f in factors)


def check_plan(plan: UnrollPlan, acc: AcceleratorSpec | None = None) -> list[str]:
    v = []
    factors: dict = {}
    for e in plan.spatial_entries + list(plan.temporal):
        if e.factor <= 1:
            v.append(f"entry {e} has factor <= 1")
        factors.setdefault((e.dim, e.param), []).append(e.factor)
    loops = dict(plan.loops)
    for key in set(loops) | set(factors):
        if not covers(loops.get(key, 1), factors.get(key, [])):
            v.append(f"loop {key} with trip {loops.get(key, 1)} not covered by {factors.get(key)}")
    if acc is not None:
        for label, es in plan.spatial:
            prod = 1
            for e in es:
                prod *= e.factor
            if prod > acc.spatial_dim(label).size:
                v.append(f"spatial dimension {label} over-subscribed: {prod}")
        classes = DATA_CLASSES if plan.has_kernel else ("input", "output")
        for level, cls in LS_LEVELS.items():
            if cls not in classes:
                continue
            ptr = plan.pointers[level]
            fp = footprint(plan.temporal[:ptr + 1], cls, plan.strides)
            if fp > acc.scratchpads[cls]:
                v.append(f"{level} tile {fp} exceeds capacity {acc.scratchpads[cls]}")
    for name, ptr in plan.pointers.items():
        if not -1 <= ptr < len(plan.temporal):
            v.append(f"pointer {name}={ptr} out of range")
    return v


def g_last_ok(plan: UnrollPlan) -> bool:
    """No g entry precedes a non-g entry within one mapping phase."""
    def ok(entries):
        seen_g = False
        for e in entries:
            if e.param == "g":
                seen_g = True
            elif seen_g:
                return False
        return True

    t = plan.temporal
    phases = [t[:plan.n_primitive], t[plan.n_primitive:plan.remainder_start],
              t[plan.remainder_start:]]
    return all(ok(es) for _, es in plan.spatial) and all(ok(p) for p in phases)


# --- loop exchange -----------------------------------------------------------

@dataclass(frozen=True)
class Exchange:
    """Swap two plan entries.  A location is ("temporal", i) or (label, i)."""
    kind: str
    first: tuple
    second: tuple


def entry_at(plan, loc):
    if loc[0] == "temporal":
        return plan.temporal[loc[1]]
    return plan.spatial_list(loc[0])[loc[1]]


def apply_exchange(plan: UnrollPlan, ex: Exchange) -> UnrollPlan:
    a, b = entry_at(plan, ex.first), entry_at(plan, ex.second)
    temporal = list(plan.temporal)
    spatial = {lab: list(es) for lab, es in plan.spatial}
    for loc, val in ((ex.first, b), (ex.second, a)):
        if loc[0] == "temporal":
            temporal[loc[1]] = val
        else:
            spatial[loc[0]][loc[1]] = val
    return replace(plan, temporal=tuple(temporal),
                   spatial=tuple((lab, tuple(spatial[lab])) for lab, _ in plan.spatial))


def _same_side(plan, i, j) -> bool:
    return all((i <= p) == (j <= p) for p in plan.pointers.values())


def _spatial_factor(plan, dim, param) -> int:
    f = 1
    for e in plan.spatial_entries:
        if e.dim == dim and e.param == param:
            f *= e.factor
    return f


def _cross_ok(plan: UnrollPlan, s_loc, t_idx) -> bool:
    s, t = entry_at(plan, s_loc), plan.temporal[t_idx]
    n1, n2 = plan.trip(s.dim, s.param), plan.trip(t.dim, t.param)
    sp1, sp2 = _spatial_factor(plan, s.dim, s.param), _spatial_factor(plan, t.dim, t.param)
    f = s.factor
    before = _ceil_div(n1, sp1) * _ceil_div(n2, sp2)
    after = _ceil_div(n1, sp1 // f) * _ceil_div(n2, sp2 * f)
    if before != after:
        return False
    new = apply_exchange(plan, Exchange("b", s_loc, ("temporal", t_idx)))
    for cls in DATA_CLASSES:
        if footprint(plan.spatial_entries, cls, plan.strides) != \
                footprint(new.spatial_entries, cls, plan.strides):
            return False
    for level, ptr in plan.pointers.items():
        cls = LS_LEVELS.get(level) or GB_LEVELS[level]
        if t_idx <= ptr and footprint(plan.temporal[:ptr + 1], cls, plan.strides) != \
                footprint(new.temporal[:ptr + 1], cls, plan.strides):
            return False
    return True


def legal_exchanges(plan: UnrollPlan) -> list[Exchange]:
    """Swaps that keep cycles, movement and every plan invariant unchanged.

    (a) two temporal entries on the same side of every pointer;
    (b) a spatial and a temporal entry of the same parameter and factor;
    (c) two entries of one spatial list.
    """
    out = []
    t = plan.temporal
    for i in range(len(t)):
        for j in range(i + 1, len(t)):
            if t[i] != t[j] and _same_side(plan, i, j):
                out.append(Exchange("a", ("temporal", i), ("temporal", j)))
    for label, es in plan.spatial:
        for i, s in enumerate(es):
            for j, te in enumerate(t):
                if s.param == te.param and s.factor == te.factor and s.dim != te.dim \
                        and _cross_ok(plan, (label, i), j):
                    out.append(Exchange("b", (label, i), ("temporal", j)))
    for label, es in plan.spatial:
        for i in range(len(es)):
            for j in range(i + 1, len(es)):
                if es[i] != es[j]:
                    out.append(Exchange("c", (label, i), (label, j)))
    return out
