import json

import numpy as np
import pytest

from gconv_chain import operators as opr
from gconv_chain.accel import (PRESETS, Exchange, UnrollEntry, UnrollPlan, accelerator_from_dict,
                               alloc_factor, apply_exchange, check_plan, covers, footprint,
                               g_last_ok, legal_exchanges, load_accelerator, map_chain,
                               map_gconv)
from gconv_chain.core import DimParams, make_gconv
from gconv_chain.errors import ParseError
from gconv_chain.perf import cycles

from generators import mapped_plan, rand_accel, rand_gconv

E = UnrollEntry
CONV = make_gconv("c", {"C": DimParams(nks=4, nop=2), "H": DimParams(nks=3, nopc=28),
                        "W": DimParams(nks=3, nopc=28)},
                  opr.Ops(main=opr.MULTIPLY, reduce=opr.ADD), "x", "k")


def _plan(temporal, spatial=(), pointers=None, loops=None):
    temporal = tuple(temporal)
    if loops is None:
        acc = {}
        for e in list(temporal) + [e for _, es in spatial for e in es]:
            acc[(e.dim, e.param)] = acc.get((e.dim, e.param), 1) * e.factor
        loops = acc
    ptrs = {k: -1 for k in ("ILS", "KLS", "OLS", "GB_input", "GB_kernel", "GB_output")}
    ptrs.update(pointers or {})
    return UnrollPlan(spatial=tuple(spatial), temporal=temporal, pointers=ptrs,
                      loops=tuple(sorted(loops.items())),
                      strides=(("B", 1), ("C", 1), ("H", 1), ("W", 1)))


@pytest.mark.parametrize("res,trip,want", [(12, 3, (3, 1, 4)), (1, 100, (1, 100, 1)),
                                           (14, 28, (14, 2, 1))])
def test_alloc_factor(res, trip, want):
    assert alloc_factor(res, trip) == want


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load_and_validate(name):
    acc = load_accelerator(name)
    assert acc.total_pes >= 1
    assert accelerator_from_dict(acc.to_dict()) == acc


def test_eyeriss_table_values():
    acc = load_accelerator("eyeriss")
    assert [(d.label, d.size) for d in acc.spatial] == [("py", 12), ("px", 14)]
    assert acc.scratchpads == {"input": 12, "kernel": 224, "output": 24}


def test_bad_accelerator_documents():
    doc = load_accelerator("eyeriss").to_dict()
    bad = dict(doc, spatial=[])
    with pytest.raises(ParseError):
        accelerator_from_dict(bad)
    with pytest.raises(ParseError):
        accelerator_from_dict(dict(doc, bogus=1))
    with pytest.raises(ParseError):
        load_accelerator("no_such_preset")


def test_load_accelerator_from_path(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps(load_accelerator("tpu").to_dict()))
    assert load_accelerator(str(p)) == load_accelerator("tpu")


def test_default_gconv_maps_to_empty_plan():
    plan = map_gconv(make_gconv("z"), load_accelerator("eyeriss"))
    assert plan.is_empty() and cycles(plan) == 1


def test_eyeriss_overlap_primitives():
    plan = map_gconv(CONV, load_accelerator("eyeriss"))
    assert plan.temporal[:2] == (E("ks", "W", 3), E("opc", "W", 28))
    assert plan.spatial_list("py")[0] == E("ks", "H", 3)
    assert plan.spatial_list("px")[0] == E("opc", "H", 14)
    assert not check_plan(plan, load_accelerator("eyeriss"))


def test_aligned_168_iterations_fully_spatial():
    g = make_gconv("f", {"C": DimParams(nks=12), "W": DimParams(nop=14)},
                   opr.Ops(main=opr.MULTIPLY, reduce=opr.ADD), "x", "k")
    plan = map_gconv(g, load_accelerator("eyeriss"))
    assert plan.temporal == () and cycles(plan) == 1


@pytest.mark.parametrize("name", PRESETS)
def test_invariants_on_presets(name):
    acc = load_accelerator(name)
    rng = np.random.default_rng(len(name))
    for i in range(60):
        plan = map_gconv(rand_gconv(rng, f"g{i}", max_trip=12, max_stride=2), acc)
        assert not check_plan(plan, acc)
        assert g_last_ok(plan)


def test_invariants_on_random_accelerators():
    rng = np.random.default_rng(11)
    for _ in range(150):
        plan, g, acc = mapped_plan(rng)
        assert not check_plan(plan, acc), (g, acc)
        assert g_last_ok(plan)


def test_mapping_is_deterministic():
    acc = load_accelerator("dnnweaver")
    assert map_gconv(CONV, acc) == map_gconv(CONV, acc)


def test_kernel_less_node_has_no_kernel():
    g = make_gconv("p", {"H": DimParams(nks=2, nopc=3, s=2)}, opr.Ops(reduce=opr.MAX), "x")
    assert not map_gconv(g, load_accelerator("eyeriss")).has_kernel


def test_map_chain_keys():
    from gconv_chain.frontend import load_network
    from gconv_chain.lowering import lower_network
    chain = lower_network(load_network("bn_forward"))
    assert set(map_chain(chain, load_accelerator("tpu"))) == {g.id for g in chain.nodes}


def test_covers():
    assert covers(28, [14, 2]) and covers(3, [3]) and covers(1, [])
    assert not covers(28, [14]) and not covers(3, [3, 2]) and not covers(1, [2])


def test_footprint_examples():
    assert footprint([E("ks", "W", 3), E("opc", "W", 5)], "input", {"W": 1}) == 7
    assert footprint([E("g", "C", 2), E("op", "C", 3), E("ks", "C", 4)], "kernel", {}) == 24
    assert footprint([], "output", {}) == 1
    # windows with gaps: 3 windows of 2 at stride 3 read 6 elements
    assert footprint([E("ks", "W", 2), E("opc", "W", 3)], "input", {"W": 3}) == 6


def test_fig10_swap_is_legal():
    plan = _plan([E("ks", "C", 4), E("ks", "W", 3)])
    ex = Exchange("a", ("temporal", 0), ("temporal", 1))
    assert ex in legal_exchanges(plan)
    assert apply_exchange(plan, ex).temporal == (E("ks", "W", 3), E("ks", "C", 4))


def test_swap_across_pointer_is_not_legal():
    plan = _plan([E("ks", "C", 4), E("ks", "W", 3)], pointers={"ILS": 0})
    assert not any(ex.kind == "a" for ex in legal_exchanges(plan))


def test_empty_plan_has_no_exchanges():
    assert legal_exchanges(_plan([], spatial=(("py", ()),))) == []


def test_exchanges_keep_invariants():
    rng = np.random.default_rng(4)
    for _ in range(80):
        plan, _, acc = mapped_plan(rng)
        for ex in legal_exchanges(plan):
            new = apply_exchange(plan, ex)
            assert cycles(new) == cycles(plan)
            assert not check_plan(new, acc)


def test_random_accelerator_valid():
    rng = np.random.default_rng(0)
    for _ in range(20):
        acc = rand_accel(rng)
        assert accelerator_from_dict(acc.to_dict()) == acc
