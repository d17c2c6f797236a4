from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gconv_chain.accel import UnrollEntry, load_accelerator, map_chain, map_gconv
from gconv_chain.chainopt import fuse_chain
from gconv_chain.core import make_gconv
from gconv_chain.errors import DependencyError
from gconv_chain.frontend import load_network
from gconv_chain.lowering import lower_network
from gconv_chain.perf import (analyze_chain, analyze_plan, compulsory, cycles, level_movement,
                              tile_footprint)

from generators import mapped_plan, rand_accel, repoint, synthetic_plan
from oracles import enum_footprint, replay_cycles, trace_movement
from test_accel import _plan

E = UnrollEntry
LEVELS = [("ILS", None), ("KLS", None), ("OLS", None),
          ("GB", "input"), ("GB", "kernel"), ("GB", "output")]


def test_cycles_ceil():
    plan = _plan([E("opc", "H", 8)], spatial=(("px", (E("opc", "H", 14),)),),
                 loops={("H", "opc"): 100})
    assert cycles(plan) == 8 == replay_cycles(plan)


def test_default_gconv_single_cycle():
    plan = map_gconv(make_gconv("z"), load_accelerator("eyeriss"))
    perf = analyze_plan(plan)
    assert perf.cycles == 1
    assert perf.movement["LS"] == {"input": 1, "kernel": 0, "output": 1}
    assert perf.compulsory == {"input": 1, "kernel": 0, "output": 1}


def test_footprint_examples():
    assert tile_footprint([E("ks", "W", 3), E("opc", "W", 5)], "input", {"W": 1}) == 7
    assert tile_footprint([E("g", "C", 2), E("op", "C", 3), E("ks", "C", 4)], "kernel") == 24
    assert tile_footprint([], "input") == 1


def test_hand_built_kernel_movement():
    plan = _plan([E("op", "C", 2), E("opc", "H", 5)],
                 spatial=(("py", (E("ks", "H", 3), E("g", "W", 2))),), pointers={"KLS": 0})
    assert level_movement(plan, "KLS") == 5 * 6 * 2 == 60
    assert trace_movement(plan, "KLS") == 60


def test_all_temporal_inside_pointer():
    plan = _plan([E("op", "C", 2), E("ks", "H", 3)], spatial=(("py", (E("op", "W", 4),)),),
                 pointers={"KLS": 1})
    assert level_movement(plan, "KLS") == 4 * 6


def test_level_argument_errors():
    plan = _plan([])
    with pytest.raises(ValueError):
        level_movement(plan, "DRAM")
    with pytest.raises(ValueError):
        level_movement(plan, "GB")
    with pytest.raises(ValueError):
        level_movement(plan, "ILS", "kernel")


def test_cycles_match_replay_on_mapped_plans():
    rng = np.random.default_rng(21)
    for _ in range(150):
        plan, _, _ = mapped_plan(rng, max_steps=20000)
        assert cycles(plan) == replay_cycles(plan)


def test_cycles_match_replay_on_synthetic_plans():
    rng = np.random.default_rng(22)
    for _ in range(150):
        plan = synthetic_plan(rng)
        assert cycles(plan) == replay_cycles(plan)


@pytest.mark.parametrize("source", ["mapped", "synthetic"])
def test_movement_matches_trace(source):
    rng = np.random.default_rng(23)
    for _ in range(80):
        plan = mapped_plan(rng, max_steps=2000)[0] if source == "mapped" \
            else synthetic_plan(rng, max_steps=2000)
        for level, cls in LEVELS:
            assert level_movement(plan, level, cls) == trace_movement(plan, level, cls)


def test_footprint_matches_enumeration():
    rng = np.random.default_rng(24)
    for _ in range(150):
        plan = synthetic_plan(rng, max_steps=512)
        ents = list(plan.temporal) + plan.spatial_entries
        for cls in ("input", "kernel", "output"):
            assert tile_footprint(ents, cls, plan.strides) == enum_footprint(ents, cls, plan.strides)


def test_monotone_in_scratchpad_capacity():
    rng = np.random.default_rng(25)
    for _ in range(80):
        plan, _, acc = mapped_plan(rng, max_steps=5000)
        small = repoint(plan, acc)
        bigger = replace(acc, scratchpads={c: v * int(rng.integers(2, 5))
                                           for c, v in acc.scratchpads.items()},
                         global_buffer={c: v * int(rng.integers(2, 5))
                                        for c, v in acc.global_buffer.items()})
        large = repoint(plan, bigger)
        for level, cls in LEVELS:
            assert level_movement(large, level, cls) <= level_movement(small, level, cls)


@st.composite
def entry_sets(draw):
    n = draw(st.integers(0, 6))
    return [E(draw(st.sampled_from(["g", "op", "ks", "opc"])), draw(st.sampled_from("BCHW")),
              draw(st.integers(2, 5))) for _ in range(n)]


@given(entry_sets(), st.sampled_from("BCHW"), st.integers(2, 6),
       st.dictionaries(st.sampled_from("BCHW"), st.integers(1, 3)))
def test_reuse_independence(entries, dim, f, strides):
    for param, cls in (("op", "input"), ("opc", "kernel"), ("ks", "output")):
        more = entries + [E(param, dim, f)]
        assert tile_footprint(more, cls, strides) == tile_footprint(entries, cls, strides)


def test_compulsory_is_lower_bound():
    rng = np.random.default_rng(26)
    for _ in range(150):
        plan = synthetic_plan(rng)
        for level, cls in LEVELS:
            c = cls or {"ILS": "input", "KLS": "kernel", "OLS": "output"}[level]
            assert level_movement(plan, level, cls) >= compulsory(plan, c)


def test_chain_totals_are_additive():
    acc = load_accelerator("eyeriss")
    for fuse in (False, True):
        chain = lower_network(load_network("bn_forward"))
        chain = fuse_chain(chain) if fuse else chain
        rep = analyze_chain(chain, map_chain(chain, acc), acc)
        assert len(rep.nodes) == (3 if fuse else 4)
        assert rep.total_cycles == sum(n.cycles for n in rep.nodes.values())
        for cls in ("input", "kernel", "output"):
            assert rep.total_movement("LS", cls) == sum(n.movement["LS"][cls]
                                                        for n in rep.nodes.values())


def test_fused_bn_moves_no_more_input():
    chain = lower_network(load_network("bn_forward"))
    for name in ("eyeriss", "tpu", "nlr"):
        acc = load_accelerator(name)
        a = analyze_chain(chain, map_chain(chain, acc), acc)
        fused = fuse_chain(chain)
        b = analyze_chain(fused, map_chain(fused, acc), acc)
        assert b.total_movement(data_class="input") <= a.total_movement(data_class="input")


def test_missing_plan_is_dependency_error():
    chain = lower_network(load_network("bn_forward"))
    with pytest.raises(DependencyError):
        analyze_chain(chain, {}, rand_accel(np.random.default_rng(0)))
