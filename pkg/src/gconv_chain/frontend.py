"""Network documents, the compile pipeline and the oracle-backed verifier."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from .accel import AcceleratorSpec, UnrollPlan, load_accelerator, map_chain
from .chain import Chain
from .chainopt import exchange_for_consistency, fuse_chain
from .errors import GConvError, ParseError, StageError, UnsupportedLayerError
from .interpreter import exec_chain
from .isa import InstructionStream, emit_instructions
from .lowering import LAYER_KINDS, LayerSpec, NetworkIR, layer_order, lower_network
from .perf import PerfReport, analyze_chain
from .reference import reference_network

FORMAT_VERSION = 1

_int_or_pair = {"oneOf": [{"type": "integer", "minimum": 0},
                          {"type": "array", "items": {"type": "integer", "minimum": 0},
                           "minItems": 2, "maxItems": 2}]}
_pos_or_pair = {"oneOf": [{"type": "integer", "minimum": 1},
                          {"type": "array", "items": {"type": "integer", "minimum": 1},
                           "minItems": 2, "maxItems": 2}]}
_num = {"type": "number"}

# kind-specific hyperparameters; everything else in a layer is rejected
LAYER_PARAMS = {
    "conv": ({"num_output": {"type": "integer", "minimum": 1}, "kernel": _pos_or_pair,
              "stride": _pos_or_pair, "pad": _int_or_pair,
              "group": {"type": "integer", "minimum": 1}}, ["num_output"]),
    "depthwise_conv": ({"kernel": _pos_or_pair, "stride": _pos_or_pair, "pad": _int_or_pair}, []),
    "fully_connected": ({"num_output": {"type": "integer", "minimum": 1}}, ["num_output"]),
    "max_pool": ({"window": _pos_or_pair, "stride": _pos_or_pair, "pad": _int_or_pair}, ["window"]),
    "avg_pool": ({"window": _pos_or_pair, "stride": _pos_or_pair, "pad": _int_or_pair}, ["window"]),
    "relu": ({}, []),
    "lrn": ({"local_size": {"type": "integer", "minimum": 1}, "alpha": _num, "beta": _num,
             "k": _num}, ["local_size"]),
    "batch_norm": ({"eps": {"type": "number", "exclusiveMinimum": 0},
                    "mode": {"enum": ["forward", "backward"]}}, []),
    "scale": ({}, []),
    "dropout_inference": ({"keep_prob": {"type": "number", "exclusiveMinimum": 0,
                                         "maximum": 1}}, []),
    "elementwise_add": ({}, []),
    "concat": ({}, []),
}
ARITY = {"elementwise_add": (2, 2), "concat": (1, None)}

_shape = {"type": "object", "additionalProperties": False, "required": ["B", "C", "H", "W"],
          "properties": {d: {"type": "integer", "minimum": 1} for d in "BCHW"}}

NETWORK_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "GCONV chain network document",
    "type": "object",
    "additionalProperties": False,
    "required": ["inputs", "layers"],
    "properties": {
        "name": {"type": "string"},
        "version": {"const": FORMAT_VERSION},
        "inputs": {"type": "object", "minProperties": 1, "additionalProperties": _shape},
        "outputs": {"type": "array", "items": {"type": "string"}},
        "layers": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "kind", "inputs"],
            "properties": {
                "id": {"type": "string", "minLength": 1},
                "kind": {"type": "string"},
                "inputs": {"type": "array", "minItems": 1, "items": {"type": "string"}},
            }}},
    },
}


def layer_schema(kind: str) -> dict:
    props, required = LAYER_PARAMS[kind]
    lo, hi = ARITY.get(kind, (1, 1))
    inputs = {"type": "array", "items": {"type": "string"}, "minItems": lo}
    if kind == "batch_norm":
        hi = 2
    if hi is not None:
        inputs["maxItems"] = hi
    return {"type": "object", "additionalProperties": False,
            "required": ["id", "kind", "inputs"] + required,
            "properties": {"id": {"type": "string"}, "kind": {"const": kind},
                           "inputs": inputs, **props}}


def network_schema_document() -> dict:
    """The network schema with every layer kind spelled out, as shipped in schemas/."""
    doc = json.loads(json.dumps(NETWORK_SCHEMA))
    doc["$defs"] = {k: layer_schema(k) for k in LAYER_PARAMS}
    doc["properties"]["layers"]["items"] = {"oneOf": [{"$ref": f"#/$defs/{k}"}
                                                      for k in LAYER_PARAMS]}
    return doc


_count = {"type": "integer", "minimum": 0}
_per_class = {"type": "object", "additionalProperties": False,
              "required": ["input", "kernel", "output"],
              "properties": {c: _count for c in ("input", "kernel", "output")}}
_movement = {"type": "object", "additionalProperties": False, "required": ["LS", "GB"],
             "properties": {"LS": _per_class, "GB": _per_class}}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "GCONV chain performance report",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "network", "accelerator", "nodes", "totals", "stats", "edges"],
    "properties": {
        "version": {"const": FORMAT_VERSION},
        "network": {"type": "string"},
        "accelerator": {"type": "string"},
        "nodes": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": False,
            "required": ["cycles", "movement", "compulsory"],
            "properties": {"cycles": {"type": "integer", "minimum": 1},
                           "movement": _movement, "compulsory": _per_class}}},
        "totals": {"type": "object", "additionalProperties": False,
                   "required": ["cycles", "movement"],
                   "properties": {"cycles": _count, "movement": _movement}},
        "stats": {"type": "object", "additionalProperties": False,
                  "required": ["chain_length", "chain_length_unfused", "length_ratio",
                               "input_movement", "input_movement_unfused",
                               "input_movement_ratio", "edges", "consistent_edges"],
                  "properties": {
                      "chain_length": _count, "chain_length_unfused": _count,
                      "length_ratio": {"type": "number"}, "input_movement": _count,
                      "input_movement_unfused": _count,
                      "input_movement_ratio": {"type": "number"},
                      "edges": _count, "consistent_edges": _count}},
        "edges": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["producer", "consumer", "depth_before", "depth_after",
                         "exchanges", "consistent"],
            "properties": {
                "producer": {"type": "string"}, "consumer": {"type": "string"},
                "depth_before": _count, "depth_after": _count,
                "consistent": {"type": "boolean"},
                "exchanges": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False,
                    "required": ["node", "kind", "swap"],
                    "properties": {"node": {"type": "string"},
                                   "kind": {"enum": ["a", "b", "c"]},
                                   "swap": {"type": "array", "items": {"type": "string"},
                                            "minItems": 2, "maxItems": 2}}}}}}},
    },
}


def _validate(doc, schema, prefix="$"):
    import jsonschema

    err = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(schema).iter_errors(doc))
    if err is not None:
        path = prefix + err.json_path[1:]
        raise ParseError(err.message, path)


def parse_network(doc: dict) -> NetworkIR:
    """Validate a network document and build its NetworkIR."""
    _validate(doc, NETWORK_SCHEMA)
    layers = []
    for i, ld in enumerate(doc["layers"]):
        kind = ld["kind"]
        if kind not in LAYER_KINDS:
            raise UnsupportedLayerError(f"$.layers[{i}]: unsupported layer kind {kind!r}")
        _validate(ld, layer_schema(kind), f"$.layers[{i}]")
        mode = ld.get("mode", "forward")
        if kind == "batch_norm" and len(ld["inputs"]) != (2 if mode == "backward" else 1):
            raise ParseError("backward batch_norm takes [forward layer, gradient]; "
                             "forward takes one input", f"$.layers[{i}].inputs")
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in ld.items()
                  if k not in ("id", "kind", "inputs", "mode")}
        layers.append(LayerSpec(ld["id"], kind, tuple(ld["inputs"]), params, mode))
    net = NetworkIR(tuple(layers), {k: dict(v) for k, v in doc["inputs"].items()},
                    tuple(doc.get("outputs", ())), doc.get("name", "net"))
    ids = {l.id for l in layers} | set(net.inputs)
    for o in net.outputs:
        if o not in ids:
            raise ParseError(f"unknown output {o!r}", "$.outputs")
    layer_order(net)
    return net


SHIPPED_NETWORKS = ("alexnet_like", "mobilenet_block", "bn_forward", "bn_train", "residual_concat")


def _read_json(text: str, where: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in {where}: {e}") from None


def load_network_doc(name_or_path) -> dict:
    key = str(name_or_path)
    if key in SHIPPED_NETWORKS:
        text = resources.files("gconv_chain").joinpath("networks").joinpath(f"{key}.json").read_text()
        return _read_json(text, key)
    p = Path(key)
    if not p.exists():
        raise ParseError(f"no shipped network or file named {key!r}")
    return _read_json(p.read_text(), key)


def load_network(name_or_path) -> NetworkIR:
    return parse_network(load_network_doc(name_or_path))


# --- serialization -----------------------------------------------------------

def _jsonable(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    return v


def _op_dict(st):
    d = {"name": st.name}
    if st.fn is not None:
        d["fn"] = st.fn
    if st.args:
        d["args"] = _jsonable(st.args)
    if st.param is not None:
        d["param"] = st.param
    return d


def gconv_to_dict(g) -> dict:
    return {
        "id": g.id,
        "dims": {d: {"ng": dp.ng, "nop": dp.nop, "nks": dp.nks, "nopc": dp.nopc,
                     "ps": dp.ps, "s": dp.s} for d, dp in g.dims},
        "ops": {"pre": [_op_dict(s) for s in g.ops.pre], "main": g.ops.main.name,
                "reduce": g.ops.reduce.name, "post": [_op_dict(s) for s in g.ops.post]},
        "input": g.input_ref,
        "kernel": g.kernel_ref,
        "fused_params": [{"slot": f.slot, "ref": f.ref, "divisors": dict(f.divisors)}
                         for f in g.fused_params],
        "output": g.output_id,
    }


def chain_to_dict(chain: Chain) -> dict:
    return {
        "dims": list(chain.dims),
        "inputs": list(chain.inputs),
        "params": list(chain.params),
        "outputs": list(chain.outputs),
        "tensors": {k: list(v) for k, v in chain.tensors.items()},
        "aliases": {a: {"dim": al.dim, "parts": list(al.parts)} for a, al in chain.aliases.items()},
        "nodes": [gconv_to_dict(g) for g in chain.nodes],
    }


def plan_to_dict(plan: UnrollPlan) -> dict:
    ent = lambda es: [[e.param, e.dim, e.factor] for e in es]
    return {
        "spatial": {lab: ent(es) for lab, es in plan.spatial},
        "temporal": ent(plan.temporal),
        "pointers": dict(plan.pointers),
        "loops": [[d, p, n] for (d, p), n in plan.loops],
        "has_kernel": plan.has_kernel,
    }


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_atomic(path, data) -> None:
    """Replace ``path`` in one step so readers never see a partial file."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- pipeline ----------------------------------------------------------------

@dataclass
class PipelineResult:
    network: NetworkIR
    lowered: Chain
    chain: Chain
    plans: dict = field(default_factory=dict)
    report: PerfReport | None = None
    edges: list = field(default_factory=list)
    stream: InstructionStream | None = None

    def report_dict(self) -> dict:
        doc = self.report.to_dict()
        doc["version"] = FORMAT_VERSION
        doc["network"] = self.network.name
        doc["edges"] = [e.to_dict() for e in self.edges]
        return doc


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except GConvError as e:
        raise StageError(name, e) from e


def run_pipeline(network, accel, fuse: bool = True, exchange: bool = True,
                 emit: bool = True) -> PipelineResult:
    """lower -> fuse -> map -> exchange -> analyze -> emit.

    ``network`` is a NetworkIR or a document; ``accel`` an AcceleratorSpec or
    a preset name/path.
    """
    net = network if isinstance(network, NetworkIR) else _stage("parse", parse_network, network)
    acc = accel if isinstance(accel, AcceleratorSpec) else _stage("accelerator", load_accelerator, accel)
    lowered = _stage("lower", lower_network, net)
    chain = _stage("fuse", fuse_chain, lowered) if fuse else lowered
    plans = _stage("map", map_chain, chain, acc)
    edges = []
    if exchange:
        plans, edges = _stage("exchange", exchange_for_consistency, chain, plans)
    report = _stage("analyze", analyze_chain, chain, plans, acc)
    base = report if chain is lowered else _stage(
        "analyze", analyze_chain, lowered, map_chain(lowered, acc), acc)
    in_fused = report.total_movement(data_class="input")
    in_base = base.total_movement(data_class="input")
    report.stats = {
        "chain_length": len(chain),
        "chain_length_unfused": len(lowered),
        "length_ratio": len(chain) / len(lowered) if len(lowered) else 1.0,
        "input_movement": in_fused,
        "input_movement_unfused": in_base,
        "input_movement_ratio": in_fused / in_base if in_base else 1.0,
        "edges": len(edges),
        "consistent_edges": sum(e.consistent for e in edges),
    }
    stream = _stage("emit", emit_instructions, chain, plans) if emit else None
    return PipelineResult(net, lowered, chain, plans, report, edges, stream)


# --- verification ------------------------------------------------------------

def _sinks(net: NetworkIR) -> list[str]:
    if net.outputs:
        return list(net.outputs)
    used = {i for l in net.layers for i in l.inputs}
    return [l.id for l in net.layers if l.id not in used]


def layer_params(net: NetworkIR, externals: dict) -> dict:
    """Chain parameter tensors rearranged into reference layouts, per layer."""
    out = {}
    for l in net.layers:
        w = externals.get(f"{l.id}.weight")
        if w is not None:
            # depthwise kernels hold one input channel per output channel
            noc = w.shape[1] if l.kind == "depthwise_conv" else int(l.params["num_output"])
            out[l.id] = {"weight": np.asarray(w).reshape(noc, -1, w.shape[2], w.shape[3])}
        gm = externals.get(f"{l.id}.gamma")
        if gm is not None:
            out[l.id] = {"gamma": np.asarray(gm).reshape(-1)}
    return out


def random_externals(chain: Chain, rng: np.random.Generator, integer: bool = False) -> dict:
    ext = {}
    for r in chain.externals:
        shape = chain.tensors[r]
        ext[r] = (rng.integers(-4, 5, size=shape).astype(np.float64) if integer
                  else rng.normal(size=shape))
    return ext


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return float("inf")
    if not a.size:
        return 0.0
    fin = np.isfinite(b)
    if not np.array_equal(fin, np.isfinite(a)) or not np.array_equal(a[~fin], b[~fin]):
        return float("inf")
    scale = max(float(np.max(np.abs(b[fin]), initial=0.0)), 1e-300)
    return float(np.max(np.abs(a[fin] - b[fin]), initial=0.0)) / scale


def verify_network(net: NetworkIR, seeds: int = 10, fuse: bool = True,
                   tol: float = 1e-5) -> dict:
    """Interpret the lowered (and fused) chain against direct layer evaluation."""
    chain = lower_network(net)
    fused = fuse_chain(chain) if fuse else chain
    order = layer_order(net)
    sinks = _sinks(net)
    worst, failed = 0.0, []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        ext = random_externals(chain, rng)
        ref = reference_network(net, {k: ext[k] for k in chain.inputs},
                                layer_params(net, ext), order)
        for c in {id(chain): chain, id(fused): fused}.values():
            got = exec_chain(c, ext)
            err = max(relative_error(got[o], ref[s]) for o, s in zip(c.outputs, sinks))
            worst = max(worst, err)
            if not err <= tol:
                failed.append(seed)
    return {"network": net.name, "seeds": seeds, "passed": seeds - len(set(failed)),
            "failed": sorted(set(failed)), "max_relative_error": worst, "tolerance": tol,
            "ok": not failed}
