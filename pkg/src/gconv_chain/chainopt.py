"""Chain-level passes: fusion of reduce-free GCONVs and format-consistent loop exchange."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import operators as opr
from .accel import UnrollPlan, apply_exchange, entry_at, legal_exchanges
from .chain import Chain, node_refs, topo_order
from .core import FusedParam, GConv

PRODUCER_PARAMS = ("opc", "op", "g")
CONSUMER_PARAMS = ("ks", "opc", "g")


# --- fusion ------------------------------------------------------------------

def is_pointwise(g: GConv) -> bool:
    """Reduce-free and one output element per input element."""
    if g.ops.reduce.name != "none":
        return False
    return all(dp.nks == 1 and dp.s == 1 and dp.ps == 0 and dp.nop == 1 for _, dp in g.dims)


def _absorb(f: GConv, slot: str, base: int):
    """f's whole computation as a pipeline for ``slot`` plus the params it needs."""
    steps, params = [], []

    def add_param(fp: FusedParam) -> int:
        params.append(replace(fp, slot=slot))
        return base + len(params) - 1

    def remap(seq):
        for st in seq:
            if st.is_binary:
                steps.append(opr.fused(st.name, add_param(f.fused_params[st.param])))
            else:
                steps.append(st)

    remap(f.ops.pre)
    main = f.ops.main.name
    if main == "square_of_input":
        steps.append(opr.SQUARE)
    elif main != "identity":
        divs = tuple((d, dp.nopc) for d, dp in f.dims if dp.nopc > 1)
        steps.append(opr.fused(main, add_param(FusedParam(slot, f.kernel_ref, divs))))
    remap(f.ops.post)
    return tuple(steps), params


def _extra_refs(f: GConv) -> list[str]:
    # drop the input once; a kernel aliasing the input still counts
    refs = list(node_refs(f))
    refs.remove(f.input_ref)
    return refs


def _available_before(chain: Chain, index: int) -> set:
    known = set(chain.externals) | {n.output_id for n in chain.nodes[:index]}
    changed = True
    while changed:
        changed = False
        for a, al in chain.aliases.items():
            if a not in known and all(p in known for p in al.parts):
                known.add(a)
                changed = True
    return known


def _try_post(chain: Chain, f: GConv) -> Chain | None:
    p = chain.producer(f.input_ref)
    if p is None or f.input_ref in chain.outputs or chain.alias_users(f.input_ref):
        return None
    if [c.id for c in chain.consumers(f.input_ref)] != [f.id]:
        return None
    if chain.tensors[p.output_id] != chain.tensors[f.output_id]:
        return None
    idx = chain.nodes.index(p)
    avail = _available_before(chain, idx)
    if any(r not in avail for r in _extra_refs(f)):
        return None
    steps, params = _absorb(f, "post", len(p.fused_params))
    merged = replace(p, ops=replace(p.ops, post=p.ops.post + steps),
                     fused_params=p.fused_params + tuple(params), output_id=f.output_id)
    nodes = [merged if n is p else n for n in chain.nodes if n is not f]
    return chain.replace_nodes(nodes)


def _try_pre(chain: Chain, f: GConv) -> Chain | None:
    out = f.output_id
    if out in chain.outputs or chain.alias_users(out):
        return None
    users = chain.consumers(out)
    if not users or any(c.input_ref != out or node_refs(c).count(out) != 1 for c in users):
        return None
    if chain.tensors[f.input_ref] != chain.tensors[out]:
        return None
    new = {}
    for c in users:
        steps, params = _absorb(f, "pre", len(c.fused_params))
        new[c.id] = replace(c, input_ref=f.input_ref,
                            ops=replace(c.ops, pre=steps + c.ops.pre),
                            fused_params=c.fused_params + tuple(params))
    nodes = [new.get(n.id, n) for n in chain.nodes if n is not f]
    return chain.replace_nodes(nodes)


def fuse_chain(chain: Chain) -> Chain:
    """Absorb pointwise reduce-free nodes into a producer's post or consumers' pre.

    Producer post is preferred; it needs the producer's output to feed only
    this node with matching extents.  Repeats until nothing changes.
    """
    changed = True
    while changed:
        changed = False
        for f in chain.nodes:
            if not is_pointwise(f):
                continue
            fused = _try_post(chain, f) or _try_pre(chain, f)
            if fused is not None:
                chain = fused
                changed = True
                break
    return chain


# --- formats and exchange ----------------------------------------------------

def derive_formats(plan: UnrollPlan, role: str) -> tuple:
    """Innermost layout-determining entries of ``plan``, innermost first."""
    if role == "producer":
        if not plan.spatial:
            return ()
        label = plan.output_format_dim or plan.spatial[-1][0]
        out = []
        for e in reversed(plan.spatial_list(label)):
            if e.param not in PRODUCER_PARAMS:
                break
            out.append(e)
        return tuple(out)
    if role == "consumer":
        out = []
        for e in plan.temporal:
            if e.param not in CONSUMER_PARAMS:
                break
            out.append(e)
        return tuple(out)
    raise ValueError(f"role must be producer or consumer, not {role!r}")


def consistency_depth(prod_fmt, cons_fmt) -> int:
    """Common-prefix length; entries match on dimension with divisible factors."""
    n = 0
    for a, b in zip(prod_fmt, cons_fmt):
        if a.dim != b.dim or (a.factor % b.factor and b.factor % a.factor):
            break
        n += 1
    return n


def _depth(pp, pc) -> int:
    return consistency_depth(derive_formats(pp, "producer"), derive_formats(pc, "consumer"))


def _full(pp, pc) -> int:
    return min(len(derive_formats(pp, "producer")), len(derive_formats(pc, "consumer")))


@dataclass
class EdgeReport:
    producer: str
    consumer: str
    depth_before: int
    depth_after: int
    exchanges: list = field(default_factory=list)
    consistent: bool = False

    def to_dict(self):
        return {"producer": self.producer, "consumer": self.consumer,
                "depth_before": self.depth_before, "depth_after": self.depth_after,
                "exchanges": self.exchanges, "consistent": self.consistent}


def _describe(node_id, ex, plan):
    return {"node": node_id, "kind": ex.kind,
            "swap": [repr(entry_at(plan, ex.first)), repr(entry_at(plan, ex.second))]}


def exchange_for_consistency(chain: Chain, plans: dict, max_steps: int = 16):
    """Greedy per-edge exchange raising producer/consumer format agreement.

    Returns the updated plans and one EdgeReport per producer-consumer edge.
    """
    plans = dict(plans)
    reports = []
    done_edges: list[tuple[str, str]] = []
    for c in topo_order(chain):
        p = chain.producer(c.input_ref)
        if p is None or p.id not in plans or c.id not in plans:
            continue
        rep = EdgeReport(p.id, c.id, _depth(plans[p.id], plans[c.id]), 0)
        for _ in range(max_steps):
            pp, pc = plans[p.id], plans[c.id]
            cur = _depth(pp, pc)
            if cur >= len(derive_formats(pp, "producer")):
                break
            best = None
            for ex in legal_exchanges(pc):
                d = _depth(pp, apply_exchange(pc, ex))
                if d > cur and (best is None or d > best[0]):
                    best = (d, c.id, ex)
            if best is None:
                siblings = [(a, b) for a, b in done_edges if a == p.id]
                for ex in legal_exchanges(pp):
                    np_ = apply_exchange(pp, ex)
                    d = _depth(np_, pc)
                    if d <= cur or (best is not None and d <= best[0]):
                        continue
                    if any(_depth(np_, plans[b]) < _depth(pp, plans[b]) for _, b in siblings):
                        continue
                    best = (d, p.id, ex)
            if best is None:
                break
            _, nid, ex = best
            rep.exchanges.append(_describe(nid, ex, plans[nid]))
            plans[nid] = apply_exchange(plans[nid], ex)
        rep.depth_after = _depth(plans[p.id], plans[c.id])
        rep.consistent = rep.depth_after >= _full(plans[p.id], plans[c.id])
        reports.append(rep)
        done_edges.append((p.id, c.id))
    return plans, reports
