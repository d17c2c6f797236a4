"""The GCONV operation model: per-dimension loop parameters, operators, validity."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import operators as opr
from .errors import InvalidGeometryError
from .operators import Ops, ScalarOp

DIM_NAMES = ("B", "C", "H", "W", "T", "V")
CANONICAL_DIMS = ("B", "C", "H", "W")
PARAMS = ("g", "op", "ks", "opc")
# scan order used by the mapper
SCAN_DIMS = ("W", "H", "C", "B", "T", "V")


@dataclass(frozen=True)
class DimParams:
    ng: int = 1
    nop: int = 1
    nks: int = 1
    nopc: int = 1
    ps: int = 0
    s: int = 1

    def trip(self, param: str) -> int:
        return {"g": self.ng, "op": self.nop, "ks": self.nks, "opc": self.nopc}[param]

    @property
    def is_default(self) -> bool:
        return self == DEFAULT_DIM


DEFAULT_DIM = DimParams()


@dataclass(frozen=True)
class FusedParam:
    """A parameter tensor absorbed by fusion.

    Element ``i`` of the operand along dimension ``d`` is read from index
    ``i // divisor[d]`` of ``ref`` (divisor > 1 means broadcast).
    """
    slot: str
    ref: str
    divisors: tuple = ()

    def divisor(self, dim: str) -> int:
        return dict(self.divisors).get(dim, 1)


@dataclass(frozen=True)
class GConv:
    id: str
    dims: tuple
    ops: Ops = Ops()
    input_ref: str = ""
    kernel_ref: str | None = None
    fused_params: tuple = ()
    output_id: str = ""

    @property
    def dim_names(self) -> tuple:
        return tuple(d for d, _ in self.dims)

    def dim(self, name: str) -> DimParams:
        for d, dp in self.dims:
            if d == name:
                return dp
        return DEFAULT_DIM

    def with_dims(self, **kw) -> "GConv":
        return replace(self, dims=tuple((d, kw.get(d, dp)) for d, dp in self.dims))


def make_gconv(id, dims=None, ops=None, input_ref="", kernel_ref=None,
               output_id=None, order=CANONICAL_DIMS) -> GConv:
    """Build a GConv listing every dimension of ``order``, defaults filled in."""
    dims = dims or {}
    extra = [d for d in dims if d not in order]
    names = list(order) + extra
    return GConv(
        id=id,
        dims=tuple((d, dims.get(d, DEFAULT_DIM)) for d in names),
        ops=ops or Ops(),
        input_ref=input_ref,
        kernel_ref=kernel_ref,
        output_id=output_id or id,
    )


def input_extent(dp: DimParams, dim: str = "?") -> int:
    """Unpadded input extent one group reads: (nopc - 1)*s + nks - 2*ps."""
    n = (dp.nopc - 1) * dp.s + dp.nks - 2 * dp.ps
    if n < 1:
        raise InvalidGeometryError(
            f"dimension {dim}: input extent {n} < 1 for {dp}")
    return n


def output_extent(dp: DimParams) -> int:
    return dp.ng * dp.nop * dp.nopc


def kernel_extent(dp: DimParams) -> int:
    return dp.ng * dp.nop * dp.nks


def tensor_input_extent(dp: DimParams, dim: str = "?") -> int:
    return dp.ng * input_extent(dp, dim)


def effective_loops(g: GConv) -> list[tuple[str, str, int]]:
    """Loops with trip count > 1, outer to inner: dims in order, g/op/opc/ks."""
    out = []
    for d, dp in g.dims:
        for p in ("g", "op", "opc", "ks"):
            n = dp.trip(p)
            if n > 1:
                out.append((d, p, n))
    return out


@dataclass(frozen=True)
class ReuseProfile:
    input_parallel: int
    kernel_parallel: int
    output_parallel: int
    overlap: bool


def reuse_profile(dp: DimParams) -> ReuseProfile:
    return ReuseProfile(
        input_parallel=dp.nop,
        kernel_parallel=dp.nopc,
        output_parallel=dp.nks,
        overlap=dp.nks > dp.s,
    )


def has_overlap(dp: DimParams) -> bool:
    """Overlap-reuse that a mapper can exploit: windows actually slide."""
    return dp.nks > dp.s and dp.nopc > 1


def _check_dim(name: str, dp: DimParams) -> list[str]:
    v = []
    for f in ("ng", "nop", "nks", "nopc"):
        if getattr(dp, f) < 1:
            v.append(f"{name}: {f} must be positive")
    if dp.s < 1:
        v.append(f"{name}: stride must be positive")
    if dp.ps < 0:
        v.append(f"{name}: padding must be nonnegative")
    if not v and 2 * dp.ps >= dp.nks + dp.s * (dp.nopc - 1):
        v.append(f"{name}: padding consumes the whole input extent")
    return v


def _check_pipeline(slot: str, steps, n_params: int) -> list[str]:
    v = []
    for st in steps:
        if not isinstance(st, ScalarOp):
            v.append(f"{slot}: {st!r} is not a ScalarOp")
        elif st.is_binary:
            if st.name not in opr.BINARY:
                v.append(f"{slot}: fused step {st.name!r} is not binary")
            if not 0 <= st.param < n_params:
                v.append(f"{slot}: fused step refers to missing param {st.param}")
        elif st.name not in opr.UNARY:
            v.append(f"{slot}: {st.name!r} is not a pre/post operator")
        elif st.name == "lut" and st.fn not in opr.LUT_REGISTRY:
            v.append(f"{slot}: unregistered lut {st.fn!r}")
        elif st.name == "scale" and len(st.args) != 1:
            v.append(f"{slot}: scale takes exactly one constant")
    return v


def validate(g: GConv) -> list[str]:
    """Return every violated invariant; an empty list means valid."""
    v = []
    names = g.dim_names
    if len(set(names)) != len(names):
        v.append("dimension listed more than once")
    for d, dp in g.dims:
        if d not in DIM_NAMES:
            v.append(f"unknown dimension {d!r}")
        v.extend(_check_dim(d, dp))
    ops = g.ops
    n_params = len(g.fused_params)
    v.extend(_check_pipeline("pre", ops.pre, n_params))
    v.extend(_check_pipeline("post", ops.post, n_params))
    if ops.main.name not in opr.MAIN or ops.main.is_binary:
        v.append(f"main: {ops.main.name!r} is not a main operator")
    if ops.reduce.name not in opr.REDUCE:
        v.append(f"reduce: {ops.reduce.name!r} is not a reduce operator")
    if ops.main.name not in opr.UNARY_MAIN and g.kernel_ref is None:
        v.append("binary main requires kernel")
    if ops.reduce.name == "none" and any(dp.nks != 1 for _, dp in g.dims):
        v.append("reduce none requires nks = 1 in every dimension")
    for i, fp in enumerate(g.fused_params):
        if fp.slot not in ("pre", "post"):
            v.append(f"fused param {i}: bad slot {fp.slot!r}")
    if not g.output_id:
        v.append("missing output id")
    if not g.input_ref:
        v.append("missing input reference")
    return v
