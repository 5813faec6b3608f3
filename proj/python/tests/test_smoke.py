import json

import pytest

import chainae


def test_metrics():
    assert chainae.evasion_rate(0, 190) == 0.0
    assert abs(chainae.relative_improvement(44.8, 34.48) - 29.93) <= 0.01
    with pytest.raises(chainae.ChainaeError) as exc:
        chainae.evasion_rate(0, 0)
    assert chainae.error_code(exc.value) == "ZeroTotal"


def test_pe_round_trip_and_fingerprint():
    data = chainae.generate_sample("malicious", 43)
    assert chainae.round_trip(data) == data
    assert chainae.validate(data) == []
    info = chainae.parse(data)
    assert info["file_size"] == len(data)
    assert 1 <= len(info["sections"]) <= 3
    assert any(s["executable"] for s in info["sections"])


def test_actions_keep_code():
    data = chainae.generate_sample("malicious", 7)
    fp = chainae.code_fingerprint(data)
    for i, kind in enumerate(chainae.action_kinds()):
        try:
            out = chainae.apply_random(data, kind, seed=i, max_file_size=2 * len(data))
        except chainae.ChainaeError as e:
            assert chainae.error_code(e) == "InapplicableAction"
            continue
        assert chainae.validate(out) == []
        assert chainae.code_fingerprint(out) == fp


def test_malformed_input():
    with pytest.raises(chainae.ChainaeError) as exc:
        chainae.parse(b"\0" * 64)
    assert chainae.error_code(exc.value) == "MalformedHeader"


def test_config_and_report_errors(tmp_path):
    cfg = chainae.default_config()
    assert len(cfg["generators"]) == 5
    with pytest.raises(chainae.ChainaeError):
        chainae.run("matrix", {"bogus": 1}, tmp_path)
    with pytest.raises(chainae.ChainaeError) as exc:
        chainae.run("report", {}, tmp_path)
    assert chainae.error_code(exc.value) == "MissingArtifacts"


def test_tiny_experiment(tmp_path):
    cfg = {
        "seed": 2,
        "corpus": {
            "detector_a_per_class": 12,
            "detector_b_per_class": 12,
            "policy_per_class": 10,
            "eval_malicious": 12,
            "eval_benign": 10,
        },
        "detectors": {
            "tree_a": {"rounds": 5},
            "tree_b": {"rounds": 5},
            "byte_a": {"epochs": 1},
            "byte_b": {"epochs": 1},
            "policy": {"episodes": 4},
        },
        "generators": [{"kind": "random", "max_actions": 5}, {"kind": "partial-dos", "rounds": 3}],
        "oracles": [{"detector": "tree-B"}],
    }
    report = chainae.run("matrix", cfg, tmp_path)
    assert report["generators"] == ["random", "partial-dos"]
    assert len(report["averaged"]["matrix"]) == 4
    doc = json.loads((tmp_path / "matrix" / "matrix.json").read_text())
    md = chainae.run("report", {}, tmp_path)
    assert "%.2f%%" % doc["summary"]["best_cell"]["rate"] in md
