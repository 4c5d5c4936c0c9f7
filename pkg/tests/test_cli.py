import json
import time

import pytest

from mslcl.autodiff import ConfigError
from mslcl.cli import SCHEMA, main, parse_config
from mslcl.data import SyntheticConfig, generate_synthetic, write_features_table

TINY = """\
num_classes: 4
m_domains: 2
d: 4
per_cell_count: 6
num_tasks: 2
epochs_per_domain: 1
batch_size: 8
hidden_dims: [8]
feature_dim: 4
repetitions: 1
learning_rate: 1e-2
"""


def write(tmp_path, text, name="exp.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestParse:
    def test_empty_file_gives_defaults(self, tmp_path):
        cfg = parse_config(write(tmp_path, ""))
        for key, (default, _, _) in SCHEMA.items():
            if key in ("method", "seed"):
                assert cfg[key] == [default]
            else:
                assert cfg[key] == default

    def test_exponent_float(self, tmp_path):
        assert parse_config(write(tmp_path, "learning_rate: 1e-3\n"))["learning_rate"] == 1e-3

    def test_flags_win(self, tmp_path):
        cfg = parse_config(write(tmp_path, "gamma: 0.9\nseed: [1, 2]\n"), {"gamma": 0.5})
        assert cfg["gamma"] == 0.5 and cfg.seeds == [1, 2]

    @pytest.mark.parametrize("text,match", [
        ("method: bogus\n", r"method\[0\].*msl_mov"),
        ("method: [msl, nope]\n", r"method\[1\]"),
        ("gamma: 2.0\n", "gamma"),
        ("batch_size: many\n", "batch_size"),
        ("colour: red\n", "unknown config keys: colour"),
        ("- 1\n- 2\n", "mapping"),
        ("a: [\n", "YAML"),
    ])
    def test_errors(self, tmp_path, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(write(tmp_path, text))


class TestMain:
    def test_bogus_method_exits_2(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", "--config", str(write(tmp_path, TINY)), "--method", "bogus", "--out", str(out)]) == 2
        assert "method" in capsys.readouterr().err
        assert not out.exists()

    def test_missing_data_exits_2(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["run", "--config", str(write(tmp_path, TINY)), "--data", str(tmp_path / "x.csv"),
                     "--out", str(out)])
        assert code == 2
        assert "cannot open" in capsys.readouterr().err
        assert not out.exists()

    def test_smoke_run_and_byte_identical_rerun(self, tmp_path):
        cfg = write(tmp_path, TINY)
        start = time.perf_counter()
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--held-out", "0"]) == 0
        assert time.perf_counter() - start < 10
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--held_out", "0"]) == 0
        name = "report__msl_mov__heldout0__seed0.json"
        a, b = (tmp_path / "a" / name).read_text(), (tmp_path / "b" / name).read_text()
        ra, rb = json.loads(a), json.loads(b)
        ra.pop("timing"), rb.pop("timing")
        assert ra == rb
        assert (tmp_path / "a" / "cells.csv").read_bytes() == (tmp_path / "b" / "cells.csv").read_bytes()
        assert (tmp_path / "a" / "summary.csv").read_text().startswith("method,held_out_0,mean")
        assert ra["format_version"] == 1 and ra["unseen_domain"] == 1
        assert ra["matrices_mean"]["unseen"][1][0] is None

    def test_feature_table_input(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(num_classes=4, m_domains=2, d=4, per_cell_count=6))
        write_features_table(ds, tmp_path / "f.csv")
        code = main(["run", "--config", str(write(tmp_path, TINY)), "--data", str(tmp_path / "f.csv"),
                     "--out", str(tmp_path / "o"), "--held-out", "1", "--method", "erm"])
        assert code == 0
        rep = json.loads((tmp_path / "o" / "report__erm__heldout1__seed0.json").read_text())
        assert rep["seed_provenance"]["data_seed"] is None

    def test_unknown_held_out_domain(self, tmp_path):
        assert main(["run", "--config", str(write(tmp_path, TINY)), "--held-out", "7",
                     "--out", str(tmp_path / "o")]) == 2

    def test_out_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MSLCL_OUT", str(tmp_path / "env"))
        assert main(["run", "--config", str(write(tmp_path, TINY)), "--held-out", "0", "--method", "msl"]) == 0
        assert (tmp_path / "env" / "report__msl__heldout0__seed0.json").exists()
