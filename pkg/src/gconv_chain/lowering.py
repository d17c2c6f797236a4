"""Lower layer-level networks into GCONV chains."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from . import operators as opr
from .chain import Alias, Chain, check_chain
from .core import (CANONICAL_DIMS, DimParams, GConv, kernel_extent, make_gconv,
                   output_extent)
from .errors import (DependencyError, GConvError, InvalidGeometryError,
                     InvalidGroupingError, ParseError, UnsupportedLayerError)
from .operators import Ops

LAYER_KINDS = ("conv", "depthwise_conv", "fully_connected", "max_pool", "avg_pool",
               "relu", "lrn", "batch_norm", "scale", "elementwise_add", "concat",
               "dropout_inference")

ELEMENTWISE_KINDS = ("relu", "scale", "dropout_inference", "elementwise_add")


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple = ()
    params: dict = field(default_factory=dict)
    mode: str = "forward"

    def get(self, key, default=None):
        return self.params.get(key, default)


@dataclass(frozen=True)
class NetworkIR:
    layers: tuple
    inputs: dict
    outputs: tuple = ()
    name: str = "net"


Shape = dict  # dimension name -> extent


def _pair(v):
    if isinstance(v, (list, tuple)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _out_len(n, k, s, p, dim):
    o = (n + 2 * p - k) // s + 1
    if o < 1:
        raise InvalidGeometryError(
            f"dimension {dim}: window {k} with pad {p} does not fit input {n}")
    return o


def _pointwise(shape: Shape, **over) -> dict:
    dims = {d: DimParams(ng=shape[d]) for d in CANONICAL_DIMS}
    dims.update(over)
    return dims


def _window_dims(shape, ky, kx, sy, sx, py, px):
    oy = _out_len(shape["H"], ky, sy, py, "H")
    ox = _out_len(shape["W"], kx, sx, px, "W")
    h = DimParams(nks=ky, nopc=oy, ps=py, s=sy)
    w = DimParams(nks=kx, nopc=ox, ps=px, s=sx)
    for d, dp in (("H", h), ("W", w)):
        if 2 * dp.ps >= dp.nks + dp.s * (dp.nopc - 1):
            raise InvalidGeometryError(f"dimension {d}: window lies entirely in padding")
    return h, w


def conv_geometry(layer: LayerSpec, shape: Shape):
    """(Noc, Ngp, ky, kx, sy, sx, py, px) for conv-like layers."""
    nic = shape["C"]
    if layer.kind == "fully_connected":
        return (int(layer.params["num_output"]), 1, shape["H"], shape["W"], 1, 1, 0, 0)
    ky, kx = _pair(layer.get("kernel", 1))
    sy, sx = _pair(layer.get("stride", 1))
    py, px = _pair(layer.get("pad", 0))
    if layer.kind == "depthwise_conv":
        noc, ngp = nic, nic
    else:
        noc, ngp = int(layer.params["num_output"]), int(layer.get("group", 1))
    return noc, ngp, ky, kx, sy, sx, py, px


def lower_conv(layer: LayerSpec, shape: Shape, input_ref: str | None = None) -> GConv:
    if layer.kind not in ("conv", "depthwise_conv", "fully_connected"):
        raise UnsupportedLayerError(f"lower_conv cannot lower {layer.kind!r}")
    noc, ngp, ky, kx, sy, sx, py, px = conv_geometry(layer, shape)
    nic = shape["C"]
    if ngp < 1 or nic % ngp or noc % ngp:
        raise InvalidGroupingError(
            f"{layer.id}: group count {ngp} must divide Nic={nic} and Noc={noc}")
    h, w = _window_dims(shape, ky, kx, sy, sx, py, px)
    dims = {
        "B": DimParams(nopc=shape["B"]),
        "C": DimParams(ng=ngp, nop=noc // ngp, nks=nic // ngp),
        "H": h,
        "W": w,
    }
    return make_gconv(layer.id, dims, Ops(main=opr.MULTIPLY, reduce=opr.ADD),
                      input_ref or layer.inputs[0], f"{layer.id}.weight")


def lower_pool(layer: LayerSpec, shape: Shape, input_ref: str | None = None) -> GConv:
    if layer.kind not in ("max_pool", "avg_pool"):
        raise UnsupportedLayerError(f"lower_pool cannot lower {layer.kind!r}")
    ky, kx = _pair(layer.params["window"])
    sy, sx = _pair(layer.get("stride", layer.params["window"]))
    py, px = _pair(layer.get("pad", 0))
    h, w = _window_dims(shape, ky, kx, sy, sx, py, px)
    dims = {"B": DimParams(ng=shape["B"]), "C": DimParams(ng=shape["C"]), "H": h, "W": w}
    if layer.kind == "max_pool":
        ops = Ops(reduce=opr.MAX)
    else:
        ops = Ops(reduce=opr.ADD, post=(opr.scale(Fraction(1, ky * kx)),))
    return make_gconv(layer.id, dims, ops, input_ref or layer.inputs[0])


def lower_lrn(layer: LayerSpec, shape: Shape, input_ref: str | None = None) -> list[GConv]:
    n = int(layer.params["local_size"])
    if n % 2 == 0:
        raise UnsupportedLayerError(f"{layer.id}: even local_size {n} needs asymmetric padding")
    k = layer.get("k", 1)
    alpha = layer.get("alpha", 1e-4)
    beta = layer.get("beta", 0.75)
    src = input_ref or layer.inputs[0]
    den = make_gconv(
        f"{layer.id}.lrn1",
        _pointwise(shape, C=DimParams(nks=n, nopc=shape["C"], ps=(n - 1) // 2)),
        Ops(pre=(opr.SQUARE,), reduce=opr.ADD, post=(opr.lut("lrn_pow", k, alpha, n, beta),)),
        src)
    out = make_gconv(f"{layer.id}.lrn2", _pointwise(shape),
                     Ops(main=opr.MULTIPLY), src, den.output_id)
    return [den, out]


def _bn_reduce_dims(shape):
    return {"B": DimParams(nks=shape["B"]),
            "C": DimParams(nopc=shape["C"]),
            "H": DimParams(nopc=shape["H"]),
            "W": DimParams(nopc=shape["W"])}


def _bn_bcast_dims(shape):
    return {"B": DimParams(nopc=shape["B"]),
            "C": DimParams(ng=shape["C"]),
            "H": DimParams(ng=shape["H"]),
            "W": DimParams(ng=shape["W"])}


def _bn_weighted_reduce_dims(shape):
    return {"B": DimParams(nks=shape["B"]),
            "C": DimParams(ng=shape["C"]),
            "H": DimParams(ng=shape["H"]),
            "W": DimParams(ng=shape["W"])}


def lower_batchnorm_fp(layer: LayerSpec, shape: Shape, input_ref: str | None = None) -> list[GConv]:
    """Four GCONVs: mean, centred input, inverse deviation, normalized output."""
    if layer.kind != "batch_norm" or layer.mode != "forward":
        raise UnsupportedLayerError(f"{layer.id}: not a forward batch_norm")
    nbs = shape["B"]
    eps = layer.get("eps", 1e-5)
    src = input_ref or layer.inputs[0]
    inv_n = Fraction(1, nbs)
    fp1 = make_gconv(f"{layer.id}.fp1", _bn_reduce_dims(shape),
                     Ops(reduce=opr.ADD, post=(opr.scale(inv_n),)), src)
    fp2 = make_gconv(f"{layer.id}.fp2", _bn_bcast_dims(shape),
                     Ops(main=opr.SUBTRACT), src, fp1.output_id)
    fp3 = make_gconv(f"{layer.id}.fp3", _bn_reduce_dims(shape),
                     Ops(main=opr.SQUARE_OF_INPUT, reduce=opr.ADD,
                         post=(opr.lut("rsqrt_eps", inv_n, eps),)),
                     fp2.output_id)
    fp4 = make_gconv(f"{layer.id}.fp4", _bn_bcast_dims(shape),
                     Ops(main=opr.MULTIPLY), fp2.output_id, fp3.output_id)
    return [fp1, fp2, fp3, fp4]


def lower_batchnorm_bp(layer: LayerSpec, shape: Shape, grad_ref: str,
                       fp3_ref: str | None, fp4_ref: str | None) -> list[GConv]:
    """Six GCONVs computing the input gradient from gO, O and 1/sqrt(var+eps)."""
    if layer.kind != "batch_norm" or layer.mode != "backward":
        raise UnsupportedLayerError(f"{layer.id}: not a backward batch_norm")
    if fp3_ref is None or fp4_ref is None:
        raise DependencyError(f"{layer.id}: backward batch_norm needs the forward "
                              "FP3 and FP4 outputs")
    inv_n = Fraction(1, shape["B"])
    pid = layer.id
    bp1 = make_gconv(f"{pid}.bp1", _bn_weighted_reduce_dims(shape),
                     Ops(main=opr.MULTIPLY, reduce=opr.ADD, post=(opr.scale(inv_n),)),
                     grad_ref, fp4_ref)
    # operands swapped w.r.t. the printed table: the batch-shared operand (t3)
    # must be the kernel for [nopc: Nbs] in B
    bp2 = make_gconv(f"{pid}.bp2", _bn_bcast_dims(shape),
                     Ops(main=opr.MULTIPLY), fp4_ref, bp1.output_id)
    bp3 = make_gconv(f"{pid}.bp3", _bn_reduce_dims(shape),
                     Ops(reduce=opr.ADD, post=(opr.scale(inv_n),)), grad_ref)
    bp4 = make_gconv(f"{pid}.bp4", _bn_bcast_dims(shape),
                     Ops(main=opr.SUBTRACT), grad_ref, bp3.output_id)
    bp5 = make_gconv(f"{pid}.bp5", _pointwise(shape),
                     Ops(main=opr.SUBTRACT), bp4.output_id, bp2.output_id)
    bp6 = make_gconv(f"{pid}.bp6", _bn_bcast_dims(shape),
                     Ops(main=opr.MULTIPLY), bp5.output_id, fp3_ref)
    return [bp1, bp2, bp3, bp4, bp5, bp6]


def lower_elementwise(layer: LayerSpec, shape: Shape, input_ref: str | None = None,
                      other_ref: str | None = None) -> GConv:
    src = input_ref or layer.inputs[0]
    kind = layer.kind
    if kind == "relu":
        return make_gconv(layer.id, _pointwise(shape),
                          Ops(post=(opr.lut("relu"),)), src)
    if kind == "dropout_inference":
        return make_gconv(layer.id, _pointwise(shape),
                          Ops(post=(opr.scale(layer.get("keep_prob", 0.5)),)), src)
    if kind == "scale":
        dims = {"B": DimParams(nopc=shape["B"]), "C": DimParams(ng=shape["C"]),
                "H": DimParams(nopc=shape["H"]), "W": DimParams(nopc=shape["W"])}
        return make_gconv(layer.id, dims, Ops(main=opr.MULTIPLY), src, f"{layer.id}.gamma")
    if kind == "elementwise_add":
        other = other_ref or layer.inputs[1]
        return make_gconv(layer.id, _pointwise(shape), Ops(main=opr.ADD), src, other)
    raise UnsupportedLayerError(f"lower_elementwise cannot lower {kind!r}")


class _ChainBuilder:
    def __init__(self, net: NetworkIR):
        self.net = net
        self.nodes: list[GConv] = []
        self.tensors: dict = {}
        self.inputs: list[str] = []
        self.params: list[str] = []
        self.aliases: dict = {}
        self.out_ref: dict[str, str] = {}
        self.bn_refs: dict[str, tuple[str, str]] = {}
        for name, shp in net.inputs.items():
            self.tensors[name] = tuple(int(shp.get(d, 1)) for d in CANONICAL_DIMS)
            self.inputs.append(name)
            self.out_ref[name] = name

    def shape(self, ref) -> Shape:
        return dict(zip(CANONICAL_DIMS, self.tensors[ref]))

    def ref(self, layer, i) -> str:
        try:
            return self.out_ref[layer.inputs[i]]
        except (KeyError, IndexError):
            raise DependencyError(f"{layer.id}: input #{i} is not available") from None

    def add(self, g: GConv):
        self.tensors[g.output_id] = tuple(output_extent(g.dim(d)) for d in CANONICAL_DIMS)
        if g.kernel_ref is not None and g.kernel_ref not in self.tensors:
            self.tensors[g.kernel_ref] = tuple(kernel_extent(g.dim(d)) for d in CANONICAL_DIMS)
            self.params.append(g.kernel_ref)
        self.nodes.append(g)
        return g.output_id

    def lower(self, layer: LayerSpec):
        kind = layer.kind
        if kind not in LAYER_KINDS:
            raise UnsupportedLayerError(f"{layer.id}: unsupported layer kind {kind!r}")
        if layer.mode == "backward" and kind != "batch_norm":
            raise UnsupportedLayerError(f"{layer.id}: backward lowering exists only for batch_norm")
        if kind == "concat":
            parts = tuple(self.ref(layer, i) for i in range(len(layer.inputs)))
            shapes = [self.shape(p) for p in parts]
            for d in ("B", "H", "W"):
                if len({s[d] for s in shapes}) != 1:
                    raise InvalidGeometryError(f"{layer.id}: concat inputs differ in {d}")
            ext = dict(shapes[0])
            ext["C"] = sum(s["C"] for s in shapes)
            self.tensors[layer.id] = tuple(ext[d] for d in CANONICAL_DIMS)
            self.aliases[layer.id] = Alias("C", parts)
            self.out_ref[layer.id] = layer.id
            return
        if kind == "batch_norm" and layer.mode == "backward":
            fwd = layer.inputs[0]
            if fwd not in self.bn_refs:
                raise DependencyError(f"{layer.id}: {fwd!r} is not a forward batch_norm")
            fp3, fp4 = self.bn_refs[fwd]
            grad = self.ref(layer, 1)
            for g in lower_batchnorm_bp(layer, self.shape(grad), grad, fp3, fp4):
                last = self.add(g)
            self.out_ref[layer.id] = last
            return
        src = self.ref(layer, 0)
        shape = self.shape(src)
        if kind in ("conv", "depthwise_conv", "fully_connected"):
            gs = [lower_conv(layer, shape, src)]
        elif kind in ("max_pool", "avg_pool"):
            gs = [lower_pool(layer, shape, src)]
        elif kind == "lrn":
            gs = lower_lrn(layer, shape, src)
        elif kind == "batch_norm":
            gs = lower_batchnorm_fp(layer, shape, src)
            self.bn_refs[layer.id] = (gs[2].output_id, gs[3].output_id)
        else:
            other = self.ref(layer, 1) if kind == "elementwise_add" else None
            if other is not None and self.shape(other) != shape:
                raise InvalidGeometryError(f"{layer.id}: elementwise_add operands differ in shape")
            gs = [lower_elementwise(layer, shape, src, other)]
        for g in gs:
            last = self.add(g)
        self.out_ref[layer.id] = last


def layer_order(net: NetworkIR) -> list[LayerSpec]:
    """Layers in topological order; raises on cycles or unknown inputs."""
    by_id = {}
    for l in net.layers:
        if l.id in by_id or l.id in net.inputs:
            raise ParseError(f"duplicate layer id {l.id!r}")
        by_id[l.id] = l
    for l in net.layers:
        for i in l.inputs:
            if i not in by_id and i not in net.inputs:
                raise DependencyError(f"{l.id}: unknown input {i!r}")
    done, order = set(net.inputs), []
    pending = list(net.layers)
    while pending:
        ready = [l for l in pending if all(i in done for i in l.inputs)]
        if not ready:
            raise ParseError("cyclic layer graph")
        for l in ready:
            order.append(l)
            done.add(l.id)
            pending.remove(l)
    return order


def lower_network(net: NetworkIR) -> Chain:
    b = _ChainBuilder(net)
    for layer in layer_order(net):
        b.lower(layer)
    if net.outputs:
        outputs = tuple(b.out_ref[o] for o in net.outputs)
    else:
        used = {i for l in net.layers for i in l.inputs}
        outputs = tuple(b.out_ref[l.id] for l in net.layers if l.id not in used)
    chain = Chain(nodes=tuple(b.nodes), tensors=b.tensors, inputs=tuple(b.inputs),
                  params=tuple(b.params), outputs=outputs, aliases=b.aliases)
    bad = check_chain(chain)
    if bad:
        raise GConvError("lowered chain is inconsistent: " + "; ".join(bad))
    return chain
