"""Execute GCONVs and chains on dense float64 tensors.

Tensor axes follow the dimension order of the GConv (for chains, the chain's
dimension order).  Reads that fall outside a group's data are padding and
contribute the identity of the reduce operator.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import operators as opr
from .chain import Chain, topo_order
from .core import GConv, input_extent, kernel_extent, output_extent
from .errors import BindingError, ShapeError


def _dim_index(dp, in_ext):
    """Per-dimension index tables of shape (outputs, ks)."""
    stride_g = in_ext // dp.ng
    o = np.arange(output_extent(dp))
    grp = o // (dp.nop * dp.nopc)
    op = (o // dp.nopc) % dp.nop
    opc = o % dp.nopc
    ks = np.arange(dp.nks)
    pos = opc[:, None] * dp.s + ks[None, :] - dp.ps
    valid = (pos >= 0) & (pos < stride_g)
    in_idx = grp[:, None] * stride_g + np.clip(pos, 0, stride_g - 1)
    k_idx = (grp * dp.nop + op)[:, None] * dp.nks + ks[None, :]
    return in_idx, valid, k_idx, o


def _bcast(a, axis, ndim):
    """Place a (outputs, ks) table on axes (axis, ndim + axis) of a 2*ndim grid."""
    shape = [1] * (2 * ndim)
    shape[axis] = a.shape[0]
    shape[ndim + axis] = a.shape[1]
    return a.reshape(shape)


def _gather_param(param, idx_per_dim, divisors):
    return param[tuple(i // d for i, d in zip(idx_per_dim, divisors))]


def _run_pipeline(steps, x, g, bindings, idx_per_dim):
    for st in steps:
        if st.is_binary:
            fp = g.fused_params[st.param]
            p = _fetch(bindings, fp.ref, g.id)
            divs = [fp.divisor(d) for d in g.dim_names]
            x = opr.apply_binary(st.name, x, _gather_param(p, idx_per_dim, divs))
        else:
            x = opr.apply_unary(st, x)
    return x


def _fetch(bindings, ref, who):
    try:
        return np.asarray(bindings[ref], dtype=np.float64)
    except KeyError:
        raise BindingError(f"{who}: tensor {ref!r} is not bound") from None


def exec_gconv(g: GConv, inputs: Mapping[str, np.ndarray], prune: bool = False) -> np.ndarray:
    """Evaluate one GConv; ``inputs`` maps tensor refs to arrays."""
    x = _fetch(inputs, g.input_ref, g.id)
    nd = len(g.dims)
    if x.ndim != nd:
        raise ShapeError(f"{g.id}: input has {x.ndim} axes, expected {nd}")
    for ax, (d, dp) in enumerate(g.dims):
        e, need = x.shape[ax], input_extent(dp, d)
        if e % dp.ng or e // dp.ng < need:
            raise ShapeError(f"{g.id}: input extent {e} in dimension {d} does "
                             f"not hold {dp.ng} groups of {need}")
    k = None
    if g.kernel_ref is not None and g.ops.main.name not in opr.UNARY_MAIN:
        k = _fetch(inputs, g.kernel_ref, g.id)
        for ax, (d, dp) in enumerate(g.dims):
            if k.shape[ax] != kernel_extent(dp):
                raise ShapeError(f"{g.id}: kernel extent {k.shape[ax]} in dimension "
                                 f"{d}, expected {kernel_extent(dp)}")
    if prune:
        return _exec_pruned(g, inputs, x, k)
    return _exec(g, inputs, x, k)


def _exec_pruned(g, inputs, x, k):
    keep = [ax for ax, (d, dp) in enumerate(g.dims)
            if not (dp.is_default and x.shape[ax] == 1)]
    if len(keep) == len(g.dims):
        return _exec(g, inputs, x, k)
    drop = tuple(ax for ax in range(len(g.dims)) if ax not in keep)
    sub = g.__class__(id=g.id, dims=tuple(g.dims[ax] for ax in keep), ops=g.ops,
                      input_ref=g.input_ref, kernel_ref=g.kernel_ref,
                      fused_params=tuple(
                          fp.__class__(fp.slot, fp.ref, tuple(
                              (d, v) for d, v in fp.divisors if d in
                              {g.dims[ax][0] for ax in keep}))
                          for fp in g.fused_params),
                      output_id=g.output_id)
    sub_inputs = dict(inputs)
    for fp in g.fused_params:
        sub_inputs[fp.ref] = np.squeeze(_fetch(inputs, fp.ref, g.id), axis=drop)
    sub_inputs[g.input_ref] = np.squeeze(x, axis=drop)
    if k is not None:
        sub_inputs[g.kernel_ref] = np.squeeze(k, axis=drop)
    y = _exec(sub, sub_inputs, sub_inputs[g.input_ref],
              None if k is None else sub_inputs[g.kernel_ref])
    return np.expand_dims(y, axis=drop)


def _exec(g, inputs, x, k):
    nd = len(g.dims)
    in_ix, k_ix, mask, out_ix = [], [], None, []
    for ax, (d, dp) in enumerate(g.dims):
        ii, valid, kk, oo = _dim_index(dp, x.shape[ax])
        in_ix.append(_bcast(ii, ax, nd))
        k_ix.append(_bcast(kk, ax, nd))
        vm = _bcast(valid, ax, nd)
        mask = vm if mask is None else mask & vm
        shape = [1] * nd
        shape[ax] = oo.size
        out_ix.append(oo.reshape(shape))
    if nd == 0:
        return x.copy()
    xs = x[tuple(in_ix)]
    xs = _run_pipeline(g.ops.pre, xs, g, inputs, in_ix)
    ks = None if k is None else k[tuple(k_ix)]
    ys = opr.apply_main(g.ops.main, xs, ks)
    ys = np.broadcast_to(ys, np.broadcast_shapes(ys.shape, mask.shape))
    out_shape = ys.shape[:nd]
    red = g.ops.reduce.name
    if red == "max":
        ys = np.where(mask, ys, -np.inf)
    else:
        ys = np.where(mask, ys, 0.0)
    flat = ys.reshape(out_shape + (-1,))
    if red == "add":
        y = np.add.reduce(flat, axis=-1)
    elif red == "max":
        y = np.maximum.reduce(flat, axis=-1)
    else:
        y = flat[..., 0]
    y = _run_pipeline(g.ops.post, y, g, inputs, out_ix)
    return np.ascontiguousarray(y, dtype=np.float64)


def materialize_alias(chain: Chain, ref: str, values: Mapping[str, np.ndarray]) -> np.ndarray:
    al = chain.aliases[ref]
    axis = chain.dims.index(al.dim)
    return np.concatenate([values[p] for p in al.parts], axis=axis)


def exec_chain(chain: Chain, externals: Mapping[str, np.ndarray],
               trace: bool = False, prune: bool = False):
    """Run every node in dependency order.

    Returns the designated outputs, or every tensor (externals included) when
    ``trace`` is set.
    """
    values = {}
    for ref in chain.externals:
        if ref not in externals:
            raise BindingError(f"external tensor {ref!r} is not bound")
        arr = np.asarray(externals[ref], dtype=np.float64)
        want = tuple(chain.tensors[ref])
        if arr.shape != want:
            raise ShapeError(f"external {ref!r} has shape {arr.shape}, expected {want}")
        values[ref] = arr

    def settle_aliases():
        for a, al in chain.aliases.items():
            if a not in values and all(p in values for p in al.parts):
                values[a] = materialize_alias(chain, a, values)

    settle_aliases()
    for g in topo_order(chain):
        settle_aliases()
        values[g.output_id] = exec_gconv(g, values, prune=prune)
    settle_aliases()
    if trace:
        return values
    return {o: values[o] for o in chain.outputs}


def grad_check(fp_chain: Chain, bp_chain: Chain, inputs: Mapping[str, np.ndarray],
               grad_out: np.ndarray, step: float = 1e-5, input_ref: str | None = None,
               grad_ref: str | None = None) -> float:
    """Max |gI - dL/dI| with L = sum(O * gO), derivative by central differences.

    ``bp_chain`` takes the forward intermediates it references plus ``grad_ref``
    as externals.
    """
    input_ref = input_ref or fp_chain.inputs[0]
    grad_ref = grad_ref or next(r for r in bp_chain.inputs if r not in fp_chain.tensors)
    out_ref = fp_chain.outputs[0]
    values = exec_chain(fp_chain, inputs, trace=True)
    bp_ext = {r: values[r] for r in bp_chain.externals if r in values}
    bp_ext[grad_ref] = grad_out
    g_in = exec_chain(bp_chain, bp_ext)[bp_chain.outputs[0]]

    x0 = np.asarray(inputs[input_ref], dtype=np.float64)
    fd = np.empty_like(x0)

    def loss(x):
        feed = dict(inputs)
        feed[input_ref] = x
        return float(np.sum(exec_chain(fp_chain, feed)[out_ref] * grad_out))

    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += step
        xm[idx] -= step
        fd[idx] = (loss(xp) - loss(xm)) / (2 * step)
    return float(np.max(np.abs(g_in - fd))) if fd.size else 0.0
