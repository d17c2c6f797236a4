"""Scalar operators for the four GCONV slots and the LUT function registry.

``pre`` and ``post`` are pipelines (tuples of steps).  An empty pipeline is
the identity.  Fusion appends binary steps that read a fused parameter
tensor; those steps carry the index of the parameter in ``GConv.fused_params``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import RegistryError

UNARY = ("identity", "square", "scale", "lut")
BINARY = ("multiply", "add", "subtract", "logical_and")
MAIN = ("identity", "multiply", "add", "subtract", "square_of_input", "logical_and")
REDUCE = ("add", "max", "none")
UNARY_MAIN = ("identity", "square_of_input")


def as_rational(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        # decimal spelling keeps e.g. 1e-5 as 1/100000
        return Fraction(repr(value))
    return Fraction(value)


@dataclass(frozen=True)
class ScalarOp:
    name: str
    args: tuple = ()
    fn: str | None = None
    param: int | None = None

    def __str__(self):
        if self.name == "lut":
            return f"lut:{self.fn}({', '.join(str(a) for a in self.args)})"
        if self.name == "scale":
            return f"scale({self.args[0]})"
        if self.param is not None:
            return f"{self.name}[p{self.param}]"
        return self.name

    @property
    def is_binary(self) -> bool:
        return self.param is not None


IDENTITY = ScalarOp("identity")
SQUARE = ScalarOp("square")
MULTIPLY = ScalarOp("multiply")
ADD = ScalarOp("add")
SUBTRACT = ScalarOp("subtract")
SQUARE_OF_INPUT = ScalarOp("square_of_input")
LOGICAL_AND = ScalarOp("logical_and")
MAX = ScalarOp("max")
NONE = ScalarOp("none")


def scale(c) -> ScalarOp:
    return ScalarOp("scale", (as_rational(c),))


def lut(fn: str, *args) -> ScalarOp:
    return ScalarOp("lut", tuple(as_rational(a) for a in args), fn=fn)


def fused(name: str, param: int) -> ScalarOp:
    if name not in BINARY:
        raise ValueError(f"fused step must be binary, got {name!r}")
    return ScalarOp(name, param=param)


@dataclass(frozen=True)
class Ops:
    pre: tuple = ()
    main: ScalarOp = IDENTITY
    reduce: ScalarOp = NONE
    post: tuple = ()


# --- LUT registry -----------------------------------------------------------

LUT_REGISTRY: dict[str, Callable[..., Callable[[np.ndarray], np.ndarray]]] = {}


def register_lut(name: str):
    def deco(factory):
        LUT_REGISTRY[name] = factory
        return factory
    return deco


@register_lut("relu")
def _relu():
    return lambda x: np.maximum(x, 0.0)


@register_lut("rsqrt_eps")
def _rsqrt_eps(scale_, eps):
    # x -> 1/sqrt(x*scale + eps); the batch-mean scale is folded in
    p, q = scale_.numerator, scale_.denominator
    e = float(eps)
    return lambda x: 1.0 / np.sqrt(x * p / q + e)


@register_lut("lrn_pow")
def _lrn_pow(k, alpha, n, beta):
    kf, af, nf, bf = float(k), float(alpha), float(n), float(beta)
    return lambda x: np.power(kf + af * x / nf, -bf)


def resolve_lut(op: ScalarOp) -> Callable[[np.ndarray], np.ndarray]:
    try:
        factory = LUT_REGISTRY[op.fn]
    except KeyError:
        raise RegistryError(f"unregistered lut {op.fn!r}") from None
    return factory(*op.args)


def apply_unary(op: ScalarOp, x: np.ndarray) -> np.ndarray:
    if op.name == "identity":
        return x
    if op.name == "square":
        return x * x
    if op.name == "scale":
        c = op.args[0]
        # x*p/q rather than x*(p/q): exact for integer-valued sums when p == 1
        return x * c.numerator / c.denominator if c.numerator != 1 else x / c.denominator
    if op.name == "lut":
        return resolve_lut(op)(x)
    raise ValueError(f"{op.name!r} is not a unary operator")


def apply_binary(name: str, x: np.ndarray, k: np.ndarray) -> np.ndarray:
    if name == "multiply":
        return x * k
    if name == "add":
        return x + k
    if name == "subtract":
        return x - k
    if name == "logical_and":
        return np.bitwise_and(x.astype(np.int64), k.astype(np.int64)).astype(np.float64)
    raise ValueError(f"{name!r} is not a binary operator")


def apply_main(op: ScalarOp, x: np.ndarray, k: np.ndarray | None) -> np.ndarray:
    if op.name == "identity":
        return x
    if op.name == "square_of_input":
        return x * x
    return apply_binary(op.name, x, k)
