"""Binary instruction stream for GCONV chains and their unroll plans.

Every entry is four little-endian uint16 fields.  Three sections follow a
header: basic info (tensors, GConv blocks), unroll lists, output addresses.
An all-zero entry closes each GConv block and each unroll list; no valid
entry is all-zero because its first field is always a nonzero type or
dimension code.  The layout is described field by field in docs/formats.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import operators as opr
from .accel import POINTERS, UnrollEntry, UnrollPlan
from .chain import Alias, Chain
from .core import DimParams, FusedParam, GConv, output_extent
from .errors import EncodingOverflowError, ParseError

VERSION = 1
U16 = 0xFFFF

# entry type codes (first field) for the basic-info and address sections
T_GCONV, T_OP, T_DIM_A, T_DIM_B, T_DIM_C, T_FUSED, T_DIVISOR = 1, 2, 3, 4, 5, 6, 7
T_CONST, T_DATA, T_NAME, T_OPS, T_TENSOR, T_EXTENT, T_ALIAS = 8, 9, 10, 11, 12, 13, 14
T_PART, T_OUTPUT, T_HEADER, T_DIMORDER, T_PLAN, T_PLAN2, T_ADDR = 15, 16, 17, 18, 19, 20, 21
T_SECTION = 31
# unroll-list entries start with a dimension code; pointer markers use 15
PTR_MARK = 15

DIM_CODES = {"B": 1, "C": 2, "H": 3, "W": 4, "T": 5, "V": 6}
PARAM_CODES = {"g": 1, "op": 2, "ks": 3, "opc": 4}
SLOT_CODES = {"pre": 1, "main": 2, "reduce": 3, "post": 4}
# 4-bit operator codes; 0 means the slot is absent
OP_CODES = {"identity": 1, "square": 2, "scale": 3, "lut": 4, "multiply": 5, "add": 6,
            "subtract": 7, "square_of_input": 8, "logical_and": 9, "max": 10}
POINTER_CODES = {name: i + 1 for i, name in enumerate(POINTERS)}
TENSOR_KINDS = {"input": 1, "param": 2}

_inv = lambda d: {v: k for k, v in d.items()}
DIM_NAMES_BY_CODE, PARAM_BY_CODE = _inv(DIM_CODES), _inv(PARAM_CODES)
SLOT_BY_CODE, OP_BY_CODE, POINTER_BY_CODE = _inv(SLOT_CODES), _inv(OP_CODES), _inv(POINTER_CODES)


@dataclass(frozen=True)
class InstructionStream:
    entries: tuple  # tuple of 4-tuples

    def to_bytes(self) -> bytes:
        return b"".join(struct.pack("<4H", *e) for e in self.entries)

    @classmethod
    def from_bytes(cls, data: bytes) -> "InstructionStream":
        if len(data) % 8:
            raise ParseError("instruction stream length is not a multiple of 8 bytes")
        arr = np.frombuffer(data, dtype="<u2").reshape(-1, 4)
        return cls(tuple(tuple(int(v) for v in row) for row in arr))

    def disassemble(self) -> str:
        return disassemble(self)


class _Writer:
    def __init__(self):
        self.out = []

    def put(self, *fields, what="field"):
        fields = tuple(fields) + (0,) * (4 - len(fields))
        for f in fields:
            if not 0 <= f <= U16:
                raise EncodingOverflowError(f"{what} value {f} does not fit in 16 bits")
        self.out.append(fields)

    def end(self):
        self.out.append((0, 0, 0, 0))

    def chunks(self, typ, values, what):
        values = list(values)
        for i in range(0, len(values), 3):
            self.put(typ, *values[i:i + 3], what=what)

    def data(self, values):
        self.chunks(T_DATA, values, "data")

    def name(self, s: str):
        raw = s.encode("utf-8")
        self.put(T_NAME, len(raw), what="name length")
        words = [int.from_bytes(raw[i:i + 2].ljust(2, b"\0"), "little")
                 for i in range(0, len(raw), 2)]
        self.data(words)

    def const(self, v: Fraction):
        num, den = _limbs(abs(v.numerator)), _limbs(v.denominator)
        self.put(T_CONST, 1 if v < 0 else 0, len(num), len(den), what="constant size")
        self.data(num + den)


def _limbs(n: int) -> list[int]:
    out = []
    while True:
        out.append(n & U16)
        n >>= 16
        if not n:
            return out


def _from_limbs(ls) -> int:
    return sum(v << (16 * i) for i, v in enumerate(ls))


def _tensor_ids(chain: Chain) -> dict:
    ids = {}
    for r in chain.externals:
        ids[r] = len(ids) + 1
    for g in chain.nodes:
        ids[g.output_id] = len(ids) + 1
    for a in chain.aliases:
        ids[a] = len(ids) + 1
    return ids


def _ops_word(ops) -> int:
    first = lambda seq: OP_CODES[seq[0].name] if seq else 0
    main = 0 if ops.main.name == "identity" else OP_CODES[ops.main.name]
    red = 0 if ops.reduce.name == "none" else OP_CODES[ops.reduce.name]
    return (first(ops.pre) << 12) | (main << 8) | (red << 4) | first(ops.post)


def emit_instructions(chain: Chain, plans: dict | None = None) -> InstructionStream:
    w = _Writer()
    ids = _tensor_ids(chain)
    w.put(T_HEADER, VERSION, len(chain.dims), len(chain.nodes), what="node count")
    w.chunks(T_DIMORDER, [DIM_CODES[d] for d in chain.dims], "dimension")

    # section 1: tensors and GConv blocks
    w.put(T_SECTION, 1)
    for r in chain.externals:
        w.put(T_TENSOR, ids[r], TENSOR_KINDS["input" if r in chain.inputs else "param"])
        w.chunks(T_EXTENT, chain.tensors[r], "extent")
    emitted = set(chain.externals)

    def flush_aliases():
        for a, al in chain.aliases.items():
            if a not in emitted and all(p in emitted for p in al.parts):
                w.put(T_ALIAS, ids[a], DIM_CODES[al.dim], len(al.parts), what="alias parts")
                w.chunks(T_PART, [ids[p] for p in al.parts], "tensor id")
                emitted.add(a)

    flush_aliases()
    for i, g in enumerate(chain.nodes, 1):
        _emit_gconv(w, g, i, ids)
        emitted.add(g.output_id)
        flush_aliases()
    for o in chain.outputs:
        w.put(T_OUTPUT, ids[o])

    # section 2: unroll lists
    w.put(T_SECTION, 2)
    if plans is not None:
        for i, g in enumerate(chain.nodes, 1):
            _emit_plan(w, plans[g.id], i)

    # section 3: output addresses from a bump allocator over the data buffer
    w.put(T_SECTION, 3)
    addr = 0
    for i, g in enumerate(chain.nodes, 1):
        if addr > 0xFFFFFFFF:
            raise EncodingOverflowError(f"output address {addr} does not fit in 32 bits")
        w.put(T_ADDR, i, addr & U16, addr >> 16)
        n = 1
        for _, dp in g.dims:
            n *= output_extent(dp)
        addr += n
    w.end()
    return InstructionStream(tuple(w.out))


def _emit_steps(w, slot, steps):
    for st in steps:
        if st.is_binary:
            w.put(T_OP, SLOT_CODES[slot], OP_CODES[st.name], st.param + 1, what="param index")
            continue
        w.put(T_OP, SLOT_CODES[slot], OP_CODES[st.name], len(st.args), what="argument count")
        if st.name == "lut":
            w.name(st.fn)
        for a in st.args:
            w.const(opr.as_rational(a))


def _emit_gconv(w, g: GConv, idx: int, ids: dict):
    kid = ids[g.kernel_ref] if g.kernel_ref is not None else 0
    w.put(T_GCONV, idx, ids[g.input_ref], kid, what="tensor id")
    w.put(T_OPS, _ops_word(g.ops), len(g.ops.pre), len(g.ops.post), what="pipeline length")
    for d, dp in g.dims:
        c = DIM_CODES[d]
        w.put(T_DIM_A, c, dp.ng, dp.nop, what=f"{g.id} {d} loop bound")
        w.put(T_DIM_B, c, dp.nks, dp.nopc, what=f"{g.id} {d} loop bound")
        w.put(T_DIM_C, c, dp.ps, dp.s, what=f"{g.id} {d} padding/stride")
    _emit_steps(w, "pre", g.ops.pre)
    _emit_steps(w, "post", g.ops.post)
    for fp in g.fused_params:
        w.put(T_FUSED, SLOT_CODES[fp.slot], ids[fp.ref], len(fp.divisors))
        for d, v in fp.divisors:
            w.put(T_DIVISOR, DIM_CODES[d], v, what="broadcast divisor")
    w.end()


def _emit_plan(w, plan: UnrollPlan, idx: int):
    labels = [lab for lab, _ in plan.spatial]
    fmt = labels.index(plan.output_format_dim) + 1 if plan.output_format_dim in labels else 0
    w.put(T_PLAN, idx, int(plan.has_kernel), plan.n_primitive, what="plan field")
    w.put(T_PLAN2, plan.remainder_start, fmt, len(labels), what="plan field")
    for lab in labels:
        w.name(lab)

    def entries(es):
        for e in es:
            w.put(DIM_CODES[e.dim], PARAM_CODES[e.param], e.factor, plan.trip(e.dim, e.param),
                  what=f"unroll {e}")

    for _, es in plan.spatial:
        entries(es)
        w.end()
    entries(plan.temporal)
    for name in POINTERS:
        w.put(PTR_MARK, POINTER_CODES[name], plan.pointers[name] + 1, what="pointer")
    w.end()


# --- decoding ----------------------------------------------------------------

class _Reader:
    def __init__(self, entries):
        self.e = entries
        self.i = 0

    def peek(self):
        if self.i >= len(self.e):
            raise ParseError("truncated instruction stream", f"entry {self.i}")
        return self.e[self.i]

    def take(self, typ=None):
        if self.i >= len(self.e):
            raise ParseError("truncated instruction stream", f"entry {self.i}")
        ent = self.e[self.i]
        if typ is not None and ent[0] != typ:
            raise ParseError(f"expected entry type {typ}, found {ent[0]}", f"entry {self.i}")
        self.i += 1
        return ent

    def chunks(self, typ, n):
        vals = []
        while len(vals) < n:
            vals.extend(self.take(typ)[1:])
        return vals[:n]

    def data(self, n):
        return self.chunks(T_DATA, n)

    def name(self) -> str:
        n = self.take(T_NAME)[1]
        words = self.data((n + 1) // 2)
        raw = b"".join(v.to_bytes(2, "little") for v in words)[:n]
        return raw.decode("utf-8")

    def const(self) -> Fraction:
        _, neg, nn, nd = self.take(T_CONST)
        limbs = self.data(nn + nd)
        v = Fraction(_from_limbs(limbs[:nn]), _from_limbs(limbs[nn:]))
        return -v if neg else v

    def end(self):
        if self.take() != (0, 0, 0, 0):
            raise ParseError("missing delimiter", f"entry {self.i - 1}")


def _read_steps(r: _Reader, slot: str, n: int):
    out = []
    for _ in range(n):
        _, sc, code, x = r.take(T_OP)
        if SLOT_BY_CODE[sc] != slot:
            raise ParseError(f"operator in slot {SLOT_BY_CODE[sc]}, expected {slot}")
        name = OP_BY_CODE[code]
        if name in opr.BINARY:
            out.append(opr.fused(name, x - 1))
        elif name == "lut":
            fn = r.name()
            out.append(opr.ScalarOp("lut", tuple(r.const() for _ in range(x)), fn=fn))
        elif name == "scale":
            out.append(opr.ScalarOp("scale", tuple(r.const() for _ in range(x))))
        else:
            out.append(opr.ScalarOp(name))
    return tuple(out)


def decode_instructions(stream: InstructionStream | bytes):
    """Inverse of emit_instructions up to canonical names.

    Returns ``(chain, plans, addresses)``; tensors are named ``t<id>`` and
    nodes ``n<index>``.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = InstructionStream.from_bytes(bytes(stream))
    r = _Reader(stream.entries)
    _, ver, ndims, nnodes = r.take(T_HEADER)
    if ver != VERSION:
        raise ParseError(f"unsupported stream version {ver}")
    dims = tuple(DIM_NAMES_BY_CODE[c] for c in r.chunks(T_DIMORDER, ndims))
    r.take(T_SECTION)
    tensors, inputs, params, aliases, outputs, nodes = {}, [], [], {}, [], []
    while r.peek()[0] != T_SECTION:
        typ = r.peek()[0]
        if typ == T_TENSOR:
            _, tid, kind, _ = r.take()
            ref = f"t{tid}"
            tensors[ref] = tuple(r.chunks(T_EXTENT, ndims))
            (inputs if kind == TENSOR_KINDS["input"] else params).append(ref)
        elif typ == T_ALIAS:
            _, tid, dc, n = r.take()
            parts = tuple(f"t{p}" for p in r.chunks(T_PART, n))
            aliases[f"t{tid}"] = Alias(DIM_NAMES_BY_CODE[dc], parts)
        elif typ == T_GCONV:
            nodes.append(_read_gconv(r, dims))
        elif typ == T_OUTPUT:
            outputs.append(f"t{r.take()[1]}")
        else:
            raise ParseError(f"unexpected entry type {typ} in basic-info section", f"entry {r.i}")
    n_ext = len(inputs) + len(params)
    nodes = [GConv(g.id, g.dims, g.ops, g.input_ref, g.kernel_ref, g.fused_params,
                   f"t{n_ext + int(g.id[1:])}") for g in nodes]
    for g in nodes:
        tensors[g.output_id] = tuple(output_extent(dp) for _, dp in g.dims)
    for a, al in aliases.items():
        ext = [tensors[al.parts[0]][k] for k in range(ndims)]
        ax = dims.index(al.dim)
        ext[ax] = sum(tensors[p][ax] for p in al.parts)
        tensors[a] = tuple(ext)
    chain = Chain(nodes=tuple(nodes), tensors=tensors, inputs=tuple(inputs),
                  params=tuple(params), outputs=tuple(outputs), aliases=aliases, dims=dims)

    r.take(T_SECTION)
    plans = {}
    while r.peek()[0] == T_PLAN:
        idx, plan = _read_plan(r, chain)
        plans[f"n{idx}"] = plan
    r.take(T_SECTION)
    addresses = {}
    while r.peek() != (0, 0, 0, 0):
        _, idx, lo, hi = r.take(T_ADDR)
        addresses[f"n{idx}"] = lo | (hi << 16)
    r.end()
    return chain, plans, addresses


def _read_gconv(r: _Reader, dims) -> GConv:
    _, idx, in_id, k_id = r.take(T_GCONV)
    _, word, npre, npost = r.take(T_OPS)
    gdims = []
    for d in dims:
        _, _, ng, nop = r.take(T_DIM_A)
        _, _, nks, nopc = r.take(T_DIM_B)
        _, _, ps, s = r.take(T_DIM_C)
        gdims.append((d, DimParams(ng, nop, nks, nopc, ps, s)))
    pre = _read_steps(r, "pre", npre)
    post = _read_steps(r, "post", npost)
    main_c, red_c = (word >> 8) & 0xF, (word >> 4) & 0xF
    main = opr.ScalarOp(OP_BY_CODE[main_c]) if main_c else opr.IDENTITY
    red = opr.ScalarOp(OP_BY_CODE[red_c]) if red_c else opr.NONE
    fused = []
    while r.peek()[0] == T_FUSED:
        _, sc, ref, n = r.take()
        divs = []
        for _ in range(n):
            _, dc, v, _ = r.take(T_DIVISOR)
            divs.append((DIM_NAMES_BY_CODE[dc], v))
        fused.append(FusedParam(SLOT_BY_CODE[sc], f"t{ref}", tuple(divs)))
    r.end()
    return GConv(id=f"n{idx}", dims=tuple(gdims), ops=opr.Ops(pre, main, red, post),
                 input_ref=f"t{in_id}", kernel_ref=f"t{k_id}" if k_id else None,
                 fused_params=tuple(fused), output_id="")


def _read_plan(r: _Reader, chain: Chain):
    _, idx, has_k, n_prim = r.take(T_PLAN)
    _, rem_start, fmt, nlists = r.take(T_PLAN2)
    labels = [r.name() for _ in range(nlists)]
    loops = {}

    def entries():
        out = []
        while r.peek() != (0, 0, 0, 0) and r.peek()[0] != PTR_MARK:
            dc, pc, f, trip = r.take()
            e = UnrollEntry(PARAM_BY_CODE[pc], DIM_NAMES_BY_CODE[dc], f)
            loops[(e.dim, e.param)] = trip
            out.append(e)
        return tuple(out)

    spatial = []
    for lab in labels:
        spatial.append((lab, entries()))
        r.end()
    temporal = entries()
    pointers = {}
    while r.peek()[0] == PTR_MARK:
        _, pc, v, _ = r.take()
        pointers[POINTER_BY_CODE[pc]] = v - 1
    r.end()
    g = chain.node(f"n{idx}")
    plan = UnrollPlan(
        spatial=tuple(spatial), temporal=temporal, pointers=pointers,
        loops=tuple(sorted(loops.items())),
        strides=tuple(sorted((d, dp.s) for d, dp in g.dims)),
        has_kernel=bool(has_k), n_primitive=n_prim, remainder_start=rem_start,
        output_format_dim=labels[fmt - 1] if fmt else None)
    return idx, plan


def canonicalize(chain: Chain, plans: dict | None = None):
    """Rename tensors and nodes to the ids used by the instruction stream."""
    ids = _tensor_ids(chain)
    t = lambda ref: f"t{ids[ref]}"
    node_name = {g.id: f"n{i}" for i, g in enumerate(chain.nodes, 1)}
    nodes = tuple(GConv(node_name[g.id], g.dims, g.ops, t(g.input_ref),
                        t(g.kernel_ref) if g.kernel_ref is not None else None,
                        tuple(FusedParam(fp.slot, t(fp.ref), fp.divisors)
                              for fp in g.fused_params),
                        t(g.output_id)) for g in chain.nodes)
    out = Chain(nodes=nodes, tensors={t(k): tuple(v) for k, v in chain.tensors.items() if k in ids},
                inputs=tuple(map(t, chain.inputs)), params=tuple(map(t, chain.params)),
                outputs=tuple(map(t, chain.outputs)),
                aliases={t(a): Alias(al.dim, tuple(map(t, al.parts)))
                         for a, al in chain.aliases.items()},
                dims=tuple(chain.dims))
    if plans is None:
        return out
    return out, {node_name[k]: v for k, v in plans.items() if k in node_name}


def disassemble(stream: InstructionStream) -> str:
    lines = []
    section = 0
    for i, e in enumerate(stream.entries):
        typ = e[0]
        if e == (0, 0, 0, 0):
            text = "end"
        elif typ == T_SECTION:
            section = e[1]
            text = f"section {section}"
        elif section == 2 and typ in DIM_NAMES_BY_CODE:
            text = f"unroll [{PARAM_BY_CODE[e[1]]},{DIM_NAMES_BY_CODE[typ]},{e[2]}] trip={e[3]}"
        elif section == 2 and typ == PTR_MARK:
            text = f"pointer {POINTER_BY_CODE[e[1]]}={e[2] - 1}"
        else:
            text = _describe(e)
        lines.append(f"{i:6d}  {e[0]:04x} {e[1]:04x} {e[2]:04x} {e[3]:04x}  {text}")
    return "\n".join(lines) + "\n"


def _describe(e) -> str:
    typ, a, b, c = e
    if typ == T_HEADER:
        return f"header version={a} dims={b} nodes={c}"
    if typ == T_DIMORDER:
        return "dims " + " ".join(DIM_NAMES_BY_CODE[x] for x in (a, b, c) if x)
    if typ == T_TENSOR:
        return f"tensor t{a} {_inv(TENSOR_KINDS)[b]}"
    if typ == T_GCONV:
        return f"gconv n{a} input=t{b} kernel={'t%d' % c if c else '-'}"
    if typ == T_OPS:
        f = lambda x: OP_BY_CODE.get(x, "-")
        return (f"ops pre={f(a >> 12)} main={f((a >> 8) & 0xF)} reduce={f((a >> 4) & 0xF)} "
                f"post={f(a & 0xF)} npre={b} npost={c}")
    if typ in (T_DIM_A, T_DIM_B, T_DIM_C):
        names = {T_DIM_A: ("ng", "nop"), T_DIM_B: ("nks", "nopc"), T_DIM_C: ("ps", "s")}[typ]
        return f"dim {DIM_NAMES_BY_CODE[a]} {names[0]}={b} {names[1]}={c}"
    if typ == T_OP:
        return f"op {SLOT_BY_CODE[a]} {OP_BY_CODE[b]} {c}"
    if typ == T_FUSED:
        return f"fused {SLOT_BY_CODE[a]} t{b} divisors={c}"
    if typ == T_DIVISOR:
        return f"divisor {DIM_NAMES_BY_CODE[a]}={b}"
    if typ == T_ADDR:
        return f"address n{a} = {b | (c << 16)}"
    names = {T_CONST: "const", T_DATA: "data", T_NAME: "name", T_EXTENT: "extent",
             T_ALIAS: "alias", T_PART: "parts", T_OUTPUT: "output", T_PLAN: "plan",
             T_PLAN2: "plan-info"}
    return f"{names.get(typ, '?')} {a} {b} {c}"
