import json

import numpy as np
import pytest

from bayesbits.arch import build_cost_model, parse_arch
from bayesbits.data import synth_dataset
from bayesbits.io import (
    ConfigFileError,
    atomic_write,
    build_report,
    load_checkpoint,
    load_config,
    model_report,
    read_front_csv,
    recompute_totals,
    save_checkpoint,
    write_front_csv,
    write_json,
)
from bayesbits.model import Model

MLP = {"input_shape": [16], "num_classes": 4, "layers": "32FC-Softmax", "input_signed": True}


def trained_ish_model():
    m = Model(parse_arch(MLP), seed=2)
    m.quantizers["fc1.w"].phi[2].data = np.where(np.arange(32) % 4 == 0, -6.0, 6.0)
    m.quantizers["fc1.w"].phi[8].data = np.array(-6.0)
    m.quantizers["fc2.a"].phi[16].data = np.array(-6.0)
    m.quantizers["fc1.a"].beta.data = np.array(2.5)
    return m


class TestReport:
    def test_totals_recompute_exactly(self, tmp_path):
        m = trained_ish_model()
        write_json(tmp_path / "r.json", model_report(m, 0.5, {"k": 1}, 7))
        parsed = json.loads((tmp_path / "r.json").read_text())
        assert recompute_totals(parsed) == parsed["totals"]
        assert parsed["totals"]["relative_bops"] == m.bops().relative

    def test_fields(self):
        rep = model_report(trained_ish_model(), 0.5, {}, 0)
        q = {e["id"]: e for e in rep["quantizers"]}
        assert q["fc1.w"]["bits"] == 4 and q["fc1.w"]["keep_ratio"] == 0.75 and q["fc1.w"]["prune_ratio"] == 0.25
        assert q["fc2.a"]["bits"] == 8 and q["fc1.a"]["signed"] and q["fc1.a"]["beta"] == 2.5
        assert [l["name"] for l in rep["layers"]] == ["fc1", "fc2"]
        assert rep["layers"][1]["p_i"] == 0.75

    def test_cost_only_report(self):
        net = build_cost_model(parse_arch({"input_shape": [1, 28, 28], "num_classes": 10,
                                           "layers": "32C5-MP2-64C5-MP2-512FC-Softmax"}))
        eff = {}
        for l in net.layers:
            eff[l.weight_quantizer] = (8, 1.0)
            eff[l.input_quantizer] = (8, 1.0)
        rep = build_report(net, eff, {}, None, {}, None)
        assert rep["totals"]["relative_bops"] == 6.25 and rep["accuracy"] is None


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = trained_ish_model()
        m.quantizers["fc2.w"].freeze()
        data = synth_dataset(0, 64, 4)
        save_checkpoint(tmp_path / "m.ckpt", m, {"epoch": 3})
        r, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"epoch": 3}
        assert r.effective_bits() == m.effective_bits()
        assert r.weight_checksum() == m.weight_checksum()
        np.testing.assert_array_equal(r.forward(data.x).data, m.forward(data.x).data)
        assert r.accuracy(data.x, data.y) == m.accuracy(data.x, data.y)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(ConfigFileError, match="magic"):
            load_checkpoint(tmp_path / "x")

    def test_bad_version(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", trained_ish_model())
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[11] = 9
        (tmp_path / "m.ckpt").write_bytes(bytes(raw))
        with pytest.raises(ConfigFileError, match="version"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_missing(self, tmp_path):
        with pytest.raises(ConfigFileError):
            load_checkpoint(tmp_path / "absent")


class TestCsvAndConfig:
    def test_front_round_trip(self, tmp_path):
        rows = [(0.01, 0.9812345678901234, 3.125), (None, 0.5, 100.0)]
        write_front_csv(tmp_path / "f.csv", rows)
        assert read_front_csv(tmp_path / "f.csv") == rows
        assert (tmp_path / "f.csv").read_text().splitlines()[0] == "mu,accuracy,relative_bops"

    @pytest.mark.parametrize("cfg", [
        {"arch": {}, "optimiser": {}},
        {"data": {"source": "mnist", "path": "x"}},
        {"data": {"source": "synthetic", "synthetic": {"n": 3}}},
        {"data": {"source": "cifar"}},
        [1, 2],
    ])
    def test_unknown_keys_rejected(self, tmp_path, cfg):
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        with pytest.raises(ConfigFileError):
            load_config(tmp_path / "c.json")

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{nope")
        with pytest.raises(ConfigFileError):
            load_config(tmp_path / "c.json")

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        atomic_write(tmp_path / "sub" / "a.bin", b"xyz")
        atomic_write(tmp_path / "sub" / "a.bin", b"abc")
        assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.bin"]
        assert (tmp_path / "sub" / "a.bin").read_bytes() == b"abc"

    def test_failed_write_keeps_old_file(self, tmp_path):
        atomic_write(tmp_path / "a.json", b"old")
        with pytest.raises(TypeError):
            write_json(tmp_path / "a.json", {"x": object()})
        assert (tmp_path / "a.json").read_bytes() == b"old"
        assert len(list(tmp_path.iterdir())) == 1
