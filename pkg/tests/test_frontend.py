import json
from pathlib import Path

import jsonschema
import pytest

from gconv_chain.accel import ACCEL_SCHEMA, PRESETS, load_accelerator
from gconv_chain.cli import main
from gconv_chain.errors import ParseError, StageError, UnsupportedLayerError
from gconv_chain.frontend import (REPORT_SCHEMA, SHIPPED_NETWORKS, dumps, load_network,
                                  load_network_doc, network_schema_document, parse_network,
                                  run_pipeline, verify_network, write_atomic)

ROOT = Path(__file__).resolve().parent.parent


def _doc(*layers, **extra):
    return {"inputs": {"x": {"B": 1, "C": 2, "H": 4, "W": 4}}, "layers": list(layers), **extra}


def test_parse_minimal_conv():
    net = parse_network(_doc({"id": "c", "kind": "conv", "inputs": ["x"], "num_output": 3,
                              "kernel": [3, 1]}))
    assert len(net.layers) == 1
    assert net.layers[0].params == {"num_output": 3, "kernel": (3, 1)}


def test_parse_mobilenet_block():
    net = load_network("mobilenet_block")
    assert [l.kind for l in net.layers] == ["depthwise_conv", "batch_norm", "scale", "relu"]
    assert [l.inputs for l in net.layers[1:]] == [("dw",), ("bn",), ("sc",)]


@pytest.mark.parametrize("doc,path", [
    (_doc({"id": "c", "kind": "conv", "inputs": ["x"]}), "$.layers[0]"),
    (_doc({"id": "c", "kind": "conv", "inputs": ["x"], "num_output": 1, "bogus": 2}),
     "$.layers[0]"),
    (_doc({"id": "c", "kind": "relu", "inputs": ["x"]}, extra=1), "$"),
    (_doc({"id": "c", "kind": "max_pool", "inputs": ["x"], "window": 0}), "$.layers[0].window"),
    ({"inputs": {"x": {"B": 1, "C": 1, "H": 1}}, "layers": []}, "$.inputs.x"),
])
def test_schema_violations_carry_path(doc, path):
    with pytest.raises(ParseError) as e:
        parse_network(doc)
    assert e.value.path == path


def test_unknown_kind():
    with pytest.raises(UnsupportedLayerError):
        parse_network(_doc({"id": "s", "kind": "softmax", "inputs": ["x"]}))


def test_cycle_message():
    with pytest.raises(ParseError, match="cyclic layer graph"):
        parse_network(_doc({"id": "a", "kind": "relu", "inputs": ["b"]},
                           {"id": "b", "kind": "relu", "inputs": ["a"]}))


def test_bad_outputs_and_bn_arity():
    with pytest.raises(ParseError):
        parse_network(_doc({"id": "a", "kind": "relu", "inputs": ["x"]}, outputs=["zz"]))
    with pytest.raises(ParseError):
        parse_network(_doc({"id": "b", "kind": "batch_norm", "inputs": ["x", "x"]}))


def test_load_errors(tmp_path):
    with pytest.raises(ParseError):
        load_network("not_a_network")
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ParseError):
        load_network(str(p))


def test_stage_errors_name_the_stage():
    doc = _doc({"id": "c", "kind": "conv", "inputs": ["x"], "num_output": 3, "group": 2})
    with pytest.raises(StageError) as e:
        run_pipeline(doc, "eyeriss")
    assert e.value.stage == "lower"
    with pytest.raises(StageError) as e:
        run_pipeline(_doc({"id": "r", "kind": "relu", "inputs": ["x"]}), "nope")
    assert e.value.stage == "accelerator"


@pytest.mark.parametrize("accel", PRESETS)
def test_presets_compile_corpus(accel):
    for name in SHIPPED_NETWORKS:
        res = run_pipeline(load_network(name), accel)
        assert set(res.plans) == {g.id for g in res.chain.nodes}
        doc = json.loads(dumps(res.report_dict()))
        jsonschema.validate(doc, REPORT_SCHEMA)
        assert doc["stats"]["chain_length"] <= doc["stats"]["chain_length_unfused"]
        assert doc["stats"]["input_movement_ratio"] <= 1


def test_bn_lengths_with_and_without_fusion():
    net = load_network("bn_forward")
    assert run_pipeline(net, "eyeriss", fuse=False).report.stats["chain_length"] == 4
    assert run_pipeline(net, "eyeriss").report.stats["chain_length"] == 3


@pytest.mark.parametrize("name", SHIPPED_NETWORKS)
def test_shipped_networks_verify(name):
    res = verify_network(load_network(name), seeds=3)
    assert res["ok"] and res["passed"] == 3


def test_schema_files_match_code():
    files = {"network": network_schema_document(), "accelerator": ACCEL_SCHEMA,
             "report": REPORT_SCHEMA}
    for stem, schema in files.items():
        text = (ROOT / "schemas" / f"{stem}.schema.json").read_text()
        assert json.loads(text) == json.loads(dumps(schema))
        jsonschema.Draft202012Validator.check_schema(schema)


def test_shipped_documents_validate_against_files():
    net_schema = json.loads((ROOT / "schemas" / "network.schema.json").read_text())
    acc_schema = json.loads((ROOT / "schemas" / "accelerator.schema.json").read_text())
    for name in SHIPPED_NETWORKS:
        jsonschema.validate(load_network_doc(name), net_schema)
    for name in PRESETS:
        jsonschema.validate(load_accelerator(name).to_dict(), acc_schema)


def test_write_atomic(tmp_path):
    p = tmp_path / "f.txt"
    write_atomic(p, "one")
    write_atomic(p, "two")
    write_atomic(tmp_path / "b.bin", b"\x00\x01")
    assert p.read_text() == "two" and (tmp_path / "b.bin").read_bytes() == b"\x00\x01"
    assert sorted(x.name for x in tmp_path.iterdir()) == ["b.bin", "f.txt"]


# --- CLI ----------------------------------------------------------------------

def test_cli_compile_writes_artifacts(tmp_path):
    rep, emit, dis, ch = (tmp_path / n for n in ("r.json", "s.bin", "s.txt", "c.json"))
    code = main(["compile", "bn_forward", "--accel", "tpu", "--report", str(rep),
                 "--emit", str(emit), "--disasm", str(dis), "--dump-chain", str(ch)])
    assert code == 0
    assert json.loads(rep.read_text())["accelerator"] == load_accelerator("tpu").name
    assert len(emit.read_bytes()) % 8 == 0 and dis.read_text().startswith("     0")
    assert len(json.loads(ch.read_text())["nodes"]) == 3


def test_cli_compile_is_deterministic(tmp_path):
    outs = []
    for i in range(2):
        r, e = tmp_path / f"r{i}.json", tmp_path / f"e{i}.bin"
        assert main(["compile", "mobilenet_block", "--report", str(r), "--emit", str(e)]) == 0
        outs.append((r.read_bytes(), e.read_bytes()))
    assert outs[0] == outs[1]


@pytest.mark.parametrize("cmd,key", [("lower", "nodes"), ("fuse", "nodes"), ("map", "plans"),
                                     ("analyze", "totals"), ("emit", "entries"),
                                     ("verify", "ok")])
def test_cli_commands_print_json(cmd, key, capsys):
    extra = ["--seeds", "2"] if cmd == "verify" else []
    assert main([cmd, "bn_forward", *extra]) == 0
    assert key in json.loads(capsys.readouterr().out)


def test_cli_no_fuse_lengths(capsys):
    main(["lower", "bn_forward"])
    assert len(json.loads(capsys.readouterr().out)["nodes"]) == 4
    main(["analyze", "bn_forward", "--no-fuse"])
    assert len(json.loads(capsys.readouterr().out)["nodes"]) == 4
    main(["analyze", "bn_forward"])
    assert len(json.loads(capsys.readouterr().out)["nodes"]) == 3


def test_cli_error_json(capsys, tmp_path):
    assert main(["compile", "no_such_net"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert (err["error"], err["stage"]) == ("ParseError", "parse")
    bad = tmp_path / "n.json"
    bad.write_text(json.dumps(_doc({"id": "c", "kind": "conv", "inputs": ["x"],
                                    "num_output": 3, "group": 2})))
    assert main(["compile", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert (err["error"], err["stage"]) == ("InvalidGroupingError", "lower")
