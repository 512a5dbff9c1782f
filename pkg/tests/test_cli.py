import json
from pathlib import Path

import numpy as np
import pytest

import dbbrep
from dbbrep.blocks import fuse_block
from dbbrep.cli import main
from dbbrep.serialization import load_spec, load_weights, manifest_spec

DATA = Path(dbbrep.__file__).parent / "data"
SAMPLE_SPEC = DATA / "sample_dbb.json"
SAMPLE_WEIGHTS = DATA / "sample_dbb_weights.json"


def parse(out):
    pairs = {}
    for line in out.splitlines():
        for tok in line.split():
            if "=" in tok:
                k, v = tok.split("=", 1)
                pairs[k] = v
    return pairs


def test_fuse_sample(tmp_path, capsys):
    out_path = tmp_path / "fused.json"
    assert main(["fuse", str(SAMPLE_SPEC), str(SAMPLE_WEIGHTS), str(out_path)]) == 0
    kv = parse(capsys.readouterr().out)
    assert kv["fused_kernel_shape"] == "8x4x3x3"
    assert float(kv["spot_check_max_error"]) <= 1e-10
    assert kv["stride"] == "1" and kv["padding"] == "1" and kv["groups"] == "1"


def test_fuse_output_matches_in_process(tmp_path, capsys):
    out_path = tmp_path / "fused.json"
    main(["fuse", str(SAMPLE_SPEC), str(SAMPLE_WEIGHTS), str(out_path)])
    spec = load_spec(SAMPLE_SPEC)
    expected = fuse_block(load_weights(SAMPLE_WEIGHTS, spec))
    written = load_weights(out_path, manifest_spec(out_path))
    assert fuse_block(written) == expected
    stage = written.branches[0].stages[0].conv
    np.testing.assert_array_equal(stage.kernel, expected.kernel)
    np.testing.assert_array_equal(stage.bias, expected.bias)


def test_fuse_missing_file(tmp_path, capsys):
    rc = main(["fuse", str(tmp_path / "nope.json"), str(SAMPLE_WEIGHTS), str(tmp_path / "o.json")])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_fuse_mismatched_weights_names_entry(tmp_path, capsys):
    spec_path = tmp_path / "spec.json"
    spec = json.loads(SAMPLE_SPEC.read_text())
    spec["kernel_size"] = 5
    spec_path.write_text(json.dumps(spec))
    rc = main(["fuse", str(spec_path), str(SAMPLE_WEIGHTS), str(tmp_path / "o.json")])
    assert rc == 2
    assert "kxk.0.kernel" in capsys.readouterr().err


def test_init_then_fuse_f32(tmp_path, capsys):
    s, w = tmp_path / "s.json", tmp_path / "w.json"
    assert main(["init", str(s), str(w), "--variant", "acb", "--in-channels", "3",
                 "--out-channels", "6", "--groups", "3", "--stride", "2", "--randomize",
                 "--element-type", "f32"]) == 0
    assert main(["fuse", str(s), str(w), str(tmp_path / "o.json")]) == 0
    kv = parse(capsys.readouterr().out)
    assert kv["fused_kernel_shape"] == "6x1x3x3"
    assert kv["stride"] == "2"


def test_verify_default(capsys):
    assert main(["verify"]) == 0
    kv = parse(capsys.readouterr().out)
    assert kv["trials"] == "100" and kv["status"] == "pass"
    assert float(kv["max_error"]) <= 1e-10


def test_verify_config_file_and_f32(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trials": 12, "variants": ["dbb", "acb"], "channels": [2, 4]}))
    assert main(["verify", "--config", str(cfg), "--dtype", "f32", "--verbose"]) == 0
    out = capsys.readouterr().out
    kv = parse(out)
    assert kv["trials"] == "12" and kv["dtype"] == "f32" and kv["tolerance"] == "0.001"
    assert sum(line.startswith("trial=") for line in out.splitlines()) == 12


def test_verify_failure_exit_code(capsys):
    assert main(["verify", "--trials", "3", "--tolerance", "1e-300"]) == 1


def test_verify_bad_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trails": 3}))
    assert main(["verify", "--config", str(cfg)]) == 2
    assert main(["verify", "--variants", "dbb,nope"]) == 2


def test_count_params_dbb(capsys):
    assert main(["count-params", "--arch", "resnet18", "--variant", "dbb"]) == 0
    kv = parse(capsys.readouterr().out)
    assert abs(int(kv["params"]) / 1e6 - 26.33) <= 0.05
    assert kv["reference_m"] == "26.33"


def test_count_params_inference(capsys):
    assert main(["count-params", "--variant", "dup3", "--phase", "inference"]) == 0
    kv = parse(capsys.readouterr().out)
    assert kv["params_m"] == "11.68"


def test_bench(capsys):
    assert main(["bench", str(SAMPLE_SPEC), "--weights", str(SAMPLE_WEIGHTS),
                 "--input-shape", "1,4,32,32", "--repeats", "3"]) == 0
    kv = parse(capsys.readouterr().out)
    assert float(kv["fused_time"]) < float(kv["branched_time"])
    assert kv["backend"] in ("compiled", "python")


def test_bench_channel_mismatch(capsys):
    assert main(["bench", str(SAMPLE_SPEC), "--input-shape", "1,3,8,8"]) == 2


@pytest.mark.parametrize("argv", [
    [],
    ["explode"],
    ["count-params", "--variant", "nope"],
    ["bench", str(SAMPLE_SPEC), "--input-shape", "1,2,3"],
    ["verify", "--trials", "many"],
])
def test_invalid_usage_exits_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_seed_from_environment(tmp_path, monkeypatch, capsys):
    def weights(seed_env, name):
        monkeypatch.setenv("DBBREP_SEED", seed_env)
        s, w = tmp_path / f"{name}.s.json", tmp_path / f"{name}.json"
        main(["init", str(s), str(w), "--randomize"])
        return (tmp_path / f"{name}.bin").read_bytes()

    assert weights("5", "a") == weights("5", "b")
    assert weights("5", "c") != weights("6", "d")
