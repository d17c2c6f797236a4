"""Acceptance criteria 1-10, one pass/fail line each."""

import subprocess
import sys
import time

import numpy as np

from gconv_chain import isa
from gconv_chain.accel import (PRESETS, apply_exchange, check_plan, footprint, g_last_ok,
                               legal_exchanges, load_accelerator, map_chain, map_gconv)
from gconv_chain.chainopt import fuse_chain
from gconv_chain.core import DimParams, input_extent, make_gconv
from gconv_chain import operators as opr
from gconv_chain.frontend import SHIPPED_NETWORKS, load_network, relative_error, run_pipeline
from gconv_chain.interpreter import exec_chain, grad_check
from gconv_chain.lowering import LAYER_KINDS, LayerSpec, NetworkIR, lower_network
from gconv_chain.perf import analyze_plan, cycles, level_movement, tile_footprint
from gconv_chain.reference import batch_norm_forward

from conftest import ACCEPTANCE_LINES
from gconv_chain.accel import UnrollEntry
from generators import (layer_case, mapped_plan, rand_dim, rand_gconv,
                        random_network, synthetic_plan)
from oracles import brute_input_extent, distinct_reads, layer_error, replay_cycles, trace_movement

LEVELS = [("ILS", None), ("KLS", None), ("OLS", None),
          ("GB", "input"), ("GB", "kernel"), ("GB", "output")]


def report(n, title, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} [{title}] {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_01_functional_equivalence():
    t0 = time.perf_counter()
    worst, fails, inexact, cases = 0.0, 0, 0, 0
    for kind in LAYER_KINDS:
        rng = np.random.default_rng(1000 + LAYER_KINDS.index(kind))
        for _ in range(200):
            err, _ = layer_error(layer_case(rng, kind), rng)
            worst = max(worst, err)
            fails += not err <= 1e-5
            cases += 1
        if kind in ("max_pool", "avg_pool", "relu"):
            for _ in range(200):
                _, exact = layer_error(layer_case(rng, kind), rng, integer=True)
                inexact += not exact
                cases += 1
    dt = time.perf_counter() - t0
    report(1, "functional equivalence", fails == 0 and inexact == 0 and dt < 60,
           f"{cases} cases over {len(LAYER_KINDS)} kinds, max rel err {worst:.2e}, "
           f"{fails} over 1e-5, {inexact} integer mismatches, {dt:.1f} s")


def _bn(nbs, c, h, w, eps):
    shape = {"B": nbs, "C": c, "H": h, "W": w}
    fwd = LayerSpec("bn", "batch_norm", ("x",), {"eps": eps})
    bwd = LayerSpec("bnb", "batch_norm", ("bn", "dy"), {"eps": eps}, mode="backward")
    fp = lower_network(NetworkIR((fwd,), {"x": shape}))
    full = lower_network(NetworkIR((fwd, bwd), {"x": shape, "dy": shape}, outputs=("bnb",)))
    bp = full.__class__(nodes=tuple(n for n in full.nodes if ".bp" in n.id),
                        tensors=full.tensors, inputs=("dy", "bn.fp3", "bn.fp4"),
                        outputs=full.outputs)
    return fp, bp


def test_criterion_02_batch_norm():
    rng = np.random.default_rng(2)
    fwd_err, bwd_err = 0.0, 0.0
    for _ in range(50):
        nbs, c, h, w = (int(v) for v in rng.integers(1, [5, 4, 3, 3]))
        eps = float(rng.choice([1e-5, 1e-3, 0.1]))
        fp, bp = _bn(nbs, c, h, w, eps)
        x = rng.normal(size=(nbs, c, h, w))
        y = exec_chain(fp, {"x": x})[fp.outputs[0]]
        fwd_err = max(fwd_err, relative_error(y, batch_norm_forward(x, eps)))
        bwd_err = max(bwd_err, grad_check(fp, bp, {"x": x}, rng.normal(size=x.shape),
                                          grad_ref="dy"))
    report(2, "batch norm", len(fp) == 4 and len(bp) == 6 and fwd_err <= 1e-12 and bwd_err < 1e-4,
           f"50 instances, forward max rel err {fwd_err:.2e} (<= 1e-12), "
           f"backward max abs err vs finite differences {bwd_err:.2e} (< 1e-4)")


def test_criterion_03_geometry():
    rng = np.random.default_rng(3)
    bad_ext = bad_fp = 0
    for _ in range(10_000):
        dp = rand_dim(rng, max_trip=12, max_stride=4)
        bad_ext += input_extent(dp) != brute_input_extent(dp)
        ents = [UnrollEntry("ks", "W", dp.nks), UnrollEntry("opc", "W", dp.nopc)]
        bad_fp += footprint(ents, "input", {"W": dp.s}) != distinct_reads(dp)
    report(3, "geometry", bad_ext == 0 and bad_fp == 0,
           f"10000 DimParams, {bad_ext} extent mismatches, {bad_fp} footprint mismatches")


def test_criterion_04_cycle_model():
    rng = np.random.default_rng(4)
    bad = 0
    for i in range(1000):
        plan = mapped_plan(rng, max_steps=10**5)[0] if i % 2 else synthetic_plan(rng, 10**5)
        bad += cycles(plan) != replay_cycles(plan)
    report(4, "cycle model", bad == 0, f"1000 plans (half mapped, half synthetic), {bad} mismatches")


def test_criterion_05_movement_model():
    rng = np.random.default_rng(5)
    bad = reuse_bad = checks = 0
    for i in range(500):
        plan = mapped_plan(rng, max_steps=1000)[0] if i % 2 else synthetic_plan(rng, 1000)
        for level, cls in LEVELS:
            bad += level_movement(plan, level, cls) != trace_movement(plan, level, cls)
        ents = list(plan.temporal) + plan.spatial_entries
        for param, cls in (("op", "input"), ("opc", "kernel"), ("ks", "output")):
            for d in "BCHW":
                extra = ents + [UnrollEntry(param, d, int(rng.integers(2, 6)))]
                reuse_bad += tile_footprint(extra, cls, plan.strides) != \
                    tile_footprint(ents, cls, plan.strides)
                checks += 1
    report(5, "movement model", bad == 0 and reuse_bad == 0,
           f"500 plans x 6 levels, {bad} trace mismatches; "
           f"{checks} reuse perturbations, {reuse_bad} violations")


def test_criterion_06_exchange_invariance():
    rng = np.random.default_rng(6)
    done = bad = 0
    while done < 1000:
        plan = mapped_plan(rng)[0] if done % 2 else synthetic_plan(rng)
        exs = legal_exchanges(plan)
        if not exs:
            continue
        new = apply_exchange(plan, exs[rng.integers(len(exs))])
        bad += cycles(new) != cycles(plan) or analyze_plan(new) != analyze_plan(plan)
        done += 1
    report(6, "exchange invariance", bad == 0, f"1000 legal exchanges, {bad} changed the model")


def test_criterion_07_fusion():
    bn = lower_network(load_network("bn_forward"))
    bn_ok = (len(bn), len(fuse_chain(bn))) == (4, 3)
    worst_len, worst_mov, best_len, best_mov, ok = 0.0, 0.0, 1.0, 1.0, True
    for name in SHIPPED_NETWORKS:
        for acc in PRESETS:
            s = run_pipeline(load_network(name), acc, exchange=False, emit=False).report.stats
            ok &= s["length_ratio"] <= 1 and s["input_movement_ratio"] <= 1
            worst_len, best_len = max(worst_len, s["length_ratio"]), min(best_len, s["length_ratio"])
            worst_mov = max(worst_mov, s["input_movement_ratio"])
            best_mov = min(best_mov, s["input_movement_ratio"])
    report(7, "fusion", bn_ok and ok,
           f"BN forward 4 -> {len(fuse_chain(bn))}; corpus {len(SHIPPED_NETWORKS)} networks x "
           f"{len(PRESETS)} presets: fused/unfused length {best_len:.2f}..{worst_len:.2f}, "
           f"input movement {best_mov:.2f}..{worst_mov:.2f}")


def test_criterion_08_mapping_sanity():
    acc = load_accelerator("eyeriss")
    table = ([(d.label, d.size) for d in acc.spatial] == [("py", 12), ("px", 14)]
             and acc.scratchpads == {"input": 12, "kernel": 224, "output": 24})
    g = make_gconv("f", {"C": DimParams(nks=12), "W": DimParams(nop=14)},
                   opr.Ops(main=opr.MULTIPLY, reduce=opr.ADD), "x", "k")
    one = cycles(map_gconv(g, acc))
    rng = np.random.default_rng(8)
    bad = 0
    for i in range(1000):
        plan = map_gconv(rand_gconv(rng, f"g{i}", max_trip=16, max_stride=3), acc)
        bad += bool(check_plan(plan, acc)) or not g_last_ok(plan)
    report(8, "mapping sanity", table and one == 1 and bad == 0,
           f"Eyeriss 12x14 ILS/KLS/OLS 12/224/24; 168-iteration GCONV -> {one} cycle; "
           f"1000 random GConvs, {bad} invariant violations")


def test_criterion_09_instruction_round_trip():
    rng = np.random.default_rng(9)
    bad = collide = 0
    for i in range(100):
        chain = lower_network(random_network(rng, name=f"n{i}"))
        if i % 2:
            chain = fuse_chain(chain)
        plans = map_chain(chain, load_accelerator(PRESETS[i % len(PRESETS)]))
        stream = isa.emit_instructions(chain, plans)
        got = isa.decode_instructions(stream.to_bytes())
        bad += got[:2] != isa.canonicalize(chain, plans)
        delimiters = len(chain) + sum(len(p.spatial) + 1 for p in plans.values()) + 1
        collide += sum(e == (0, 0, 0, 0) for e in stream.entries) != delimiters
    report(9, "instruction round trip", bad == 0 and collide == 0,
           f"100 random chains, {bad} decode mismatches, {collide} delimiter collisions")


def test_criterion_10_determinism(tmp_path):
    differ = []
    for name in ("alexnet_like", "mobilenet_block"):
        for acc in PRESETS:
            outs = []
            for run in range(2):
                rep, emit = tmp_path / f"{name}.{acc}.{run}.json", tmp_path / f"{name}.{acc}.{run}.bin"
                subprocess.run([sys.executable, "-m", "gconv_chain.cli", "compile", name,
                                "--accel", acc, "--report", str(rep), "--emit", str(emit)],
                               check=True)
                outs.append((rep.read_bytes(), emit.read_bytes()))
            if outs[0] != outs[1]:
                differ.append(f"{name}/{acc}")
    report(10, "end-to-end determinism", not differ,
           f"2 networks x {len(PRESETS)} presets compiled twice in fresh processes, "
           f"{len(differ)} differ {differ or ''}".rstrip())
