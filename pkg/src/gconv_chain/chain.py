"""GCONV chains: a DAG of GConv nodes wired through named tensors."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .core import (CANONICAL_DIMS, GConv, input_extent, kernel_extent,
                   output_extent, validate)
from .errors import GConvError


@dataclass(frozen=True)
class Alias:
    """A tensor assembled from other tensors laid end to end along ``dim``."""
    dim: str
    parts: tuple

    def offsets(self, extents: dict) -> list[tuple[str, int]]:
        out, off = [], 0
        for ref in self.parts:
            out.append((ref, off))
            off += extents[ref]
        return out


@dataclass(frozen=True)
class Chain:
    nodes: tuple
    tensors: dict
    inputs: tuple = ()
    params: tuple = ()
    outputs: tuple = ()
    aliases: dict = field(default_factory=dict)
    dims: tuple = CANONICAL_DIMS

    def __len__(self):
        return len(self.nodes)

    @property
    def externals(self) -> tuple:
        return self.inputs + self.params

    def extent(self, ref: str) -> dict:
        return dict(zip(self.dims, self.tensors[ref]))

    def node(self, node_id: str) -> GConv:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producer(self, ref: str) -> GConv | None:
        for n in self.nodes:
            if n.output_id == ref:
                return n
        return None

    def consumers(self, ref: str) -> list[GConv]:
        return [n for n in self.nodes if ref in node_refs(n)]

    def alias_users(self, ref: str) -> list[str]:
        return [a for a, al in self.aliases.items() if ref in al.parts]

    def replace_nodes(self, nodes) -> "Chain":
        nodes = tuple(nodes)
        live = set(self.externals) | {n.output_id for n in nodes} | set(self.aliases)
        tensors = {k: v for k, v in self.tensors.items() if k in live}
        return replace(self, nodes=nodes, tensors=tensors)


def node_refs(g: GConv) -> list[str]:
    refs = [g.input_ref]
    if g.kernel_ref is not None:
        refs.append(g.kernel_ref)
    refs.extend(fp.ref for fp in g.fused_params)
    return refs


def _ceil_div(a, b):
    return -(-a // b)


def check_chain(chain: Chain) -> list[str]:
    """Structural and extent violations of a chain; empty when valid."""
    v = []
    known = set(chain.externals)
    for r in known:
        if r not in chain.tensors:
            v.append(f"external {r!r} has no extents")
    pending_alias = dict(chain.aliases)

    def resolve_aliases():
        changed = True
        while changed:
            changed = False
            for a, al in list(pending_alias.items()):
                if all(p in known for p in al.parts):
                    known.add(a)
                    del pending_alias[a]
                    changed = True

    resolve_aliases()
    seen_ids = set()
    for g in chain.nodes:
        if g.id in seen_ids:
            v.append(f"{g.id}: duplicate node id")
        seen_ids.add(g.id)
        bad = [f"{g.id}: {msg}" for msg in validate(g)]
        if tuple(g.dim_names) != tuple(chain.dims):
            bad.append(f"{g.id}: dims {g.dim_names} differ from chain dims {chain.dims}")
        bad += [f"{g.id}: {r!r} used before it is produced"
                for r in node_refs(g) if r not in known]
        if not bad:
            try:
                bad = _check_extents(chain, g)
            except GConvError as e:
                bad = [f"{g.id}: {e}"]
        v.extend(bad)
        if g.output_id in known:
            v.append(f"{g.id}: output {g.output_id!r} produced twice")
        known.add(g.output_id)
        resolve_aliases()
    for a in pending_alias:
        v.append(f"alias {a!r} has unresolved parts")
    for o in chain.outputs:
        if o not in known:
            v.append(f"designated output {o!r} is never produced")
    return v


def _check_extents(chain: Chain, g: GConv) -> list[str]:
    v = []
    ext_in = chain.extent(g.input_ref)
    for d, dp in g.dims:
        e, need = ext_in[d], input_extent(dp, d)
        if e % dp.ng or e // dp.ng < need:
            v.append(f"{g.id}: input extent {e} in {d} does not hold "
                     f"{dp.ng} groups of {need}")
    if g.kernel_ref is not None:
        ext_k = chain.extent(g.kernel_ref)
        for d, dp in g.dims:
            if ext_k[d] != kernel_extent(dp):
                v.append(f"{g.id}: kernel extent {ext_k[d]} in {d}, "
                         f"expected {kernel_extent(dp)}")
    out = {d: output_extent(dp) for d, dp in g.dims}
    if g.output_id in chain.tensors and chain.extent(g.output_id) != out:
        v.append(f"{g.id}: output extents {chain.extent(g.output_id)} != {out}")
    for i, fp in enumerate(g.fused_params):
        space = ext_in if fp.slot == "pre" else out
        ext_p = chain.extent(fp.ref)
        for d in chain.dims:
            want = _ceil_div(space[d], fp.divisor(d))
            if ext_p[d] != want:
                v.append(f"{g.id}: fused param {i} extent {ext_p[d]} in {d}, "
                         f"expected {want}")
    return v


def topo_order(chain: Chain) -> list[GConv]:
    """Nodes in dependency order (stable w.r.t. the stored order)."""
    available = set(chain.externals)
    remaining = list(chain.nodes)
    order = []
    while remaining:
        progressed = False
        for a, al in chain.aliases.items():
            if a not in available and all(p in available for p in al.parts):
                available.add(a)
        for g in list(remaining):
            if all(r in available for r in node_refs(g)):
                order.append(g)
                available.add(g.output_id)
                remaining.remove(g)
                progressed = True
                break
        if not progressed:
            raise GConvError("chain has a cycle or a dangling reference: "
                             + ", ".join(g.id for g in remaining))
    return order
