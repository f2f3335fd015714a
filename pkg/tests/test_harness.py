import csv
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from kubolab.cli import main
from kubolab.config import ConfigError, RunConfig, parse_config
from kubolab.io import SCHEMA_VERSION, ArtifactBuffer, csv_text, svg_plot

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

RANDOM = """
pipeline = ["build", "kubo"]

[model]
L = 12
lam = 0.3

[model.potential]
kind = "random_bumps"
count = 4
radius = 3.0

[probes]
quantization_tolerance = 0.2
"""


def write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_defaults_validate():
    cfg = RunConfig()
    assert cfg.pipeline == ["build", "kubo"] and cfg.model.L == 24 and cfg.drive.taus[0] == 32.0


@pytest.mark.parametrize("text,line,key", [
    ("[model]\nL = 12\nwidth = 3\n", 3, "model.width"),
    ("pipeline = [\"build\"]\n\n[drive]\nk = 0\n", 4, "drive.k"),
    ("[probes]\ns = [0.5, 1.5]\n", 1, "probes"),
    ("[outputs]\nformats = [\"png\"]\n", 2, "outputs.formats"),
])
def test_schema_errors_carry_line_and_key(text, line, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "demo.toml")
    msg = str(info.value)
    assert f"demo.toml:{line}: {key}" in msg


def test_toml_syntax_error():
    with pytest.raises(ConfigError, match="demo.toml"):
        parse_config("[model\nL = 3", "demo.toml")


def test_minimal_config_runs(tmp_path, capsys):
    out = tmp_path / "min"
    assert main(["run", "--config", str(CONFIGS / "minimal.toml"), "--out", str(out)]) == 0
    kubo = json.loads((out / "kubo.json").read_text())
    assert kubo["oracle"] == 1 and abs(kubo["normalized"] - 1) <= 0.2
    with open(out / "spectrum.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 144
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["schema_version"] == SCHEMA_VERSION and manifest["status"] == "ok"
    assert manifest["config"]["model"]["L"] == 12
    assert sorted(manifest["files"]) == sorted(p.name for p in out.iterdir())


def test_no_gap_writes_only_the_manifest(tmp_path):
    out = tmp_path / "nogap"
    assert main(["run", "--config", str(CONFIGS / "nogap.toml"), "--out", str(out)]) == 3
    assert [p.name for p in out.iterdir()] == ["manifest.json"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "no_gap" and manifest["files"] == []


def test_config_errors_exit_with_code_two(tmp_path):
    bad = write(tmp_path, "[model]\nq = 0\n")
    assert main(["run", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["kubo", "--config", str(CONFIGS / "minimal.toml"), "--seed", "-1"]) == 2
    assert main(["kubo", "--config", str(CONFIGS / "minimal.toml"), "--seed", str(2 ** 64)]) == 2
    # flux too large for the lattice is a model error, reported as a config problem
    small = write(tmp_path, "[model]\nL = 4\nq = 3\n", "small.toml")
    assert main(["run", "--config", small, "--out", str(tmp_path / "y")]) == 2
    assert not (tmp_path / "x").exists()


def test_same_seed_gives_identical_bytes(tmp_path):
    path = write(tmp_path, RANDOM)
    outs = [tmp_path / name for name in ("a", "b", "c")]
    for out, seed in zip(outs, ("7", "7", "8")):
        assert main(["run", "--config", path, "--out", str(out), "--seed", seed]) == 0
    a, b, c = ((o / "spectrum.csv").read_bytes() for o in outs)
    assert a == b and a != c
    assert (outs[0] / "kubo.json").read_bytes() == (outs[1] / "kubo.json").read_bytes()
    assert json.loads((outs[2] / "manifest.json").read_text())["seed"] == 8


def test_cache_does_not_change_outputs(tmp_path, monkeypatch):
    path = write(tmp_path, RANDOM)
    assert main(["run", "--config", path, "--out", str(tmp_path / "plain")]) == 0
    monkeypatch.setenv("KUBOLAB_CACHE_DIR", str(tmp_path / "cache"))
    for name in ("miss", "hit"):
        assert main(["run", "--config", path, "--out", str(tmp_path / name)]) == 0
    assert len(list((tmp_path / "cache").glob("eig-*.npz"))) == 1
    for f in ("spectrum.csv", "kubo.json", "summary.json"):
        ref = (tmp_path / "plain" / f).read_bytes()
        assert (tmp_path / "miss" / f).read_bytes() == ref == (tmp_path / "hit" / f).read_bytes()


def test_single_stage_and_report(tmp_path):
    out = tmp_path / "stage"
    assert main(["kubo", "--config", str(CONFIGS / "minimal.toml"), "--out", str(out)]) == 0
    assert (out / "kubo.json").exists() and not (out / "spectrum.csv").exists()
    assert main(["report", "--out", str(out)]) == 0
    merged = json.loads((out / "report.json").read_text())
    assert merged["passed"] is True and "kubo" in merged["stages"]


def test_failed_acceptance_exits_with_code_one(tmp_path):
    strict = (CONFIGS / "minimal.toml").read_text().replace("quantization_tolerance = 0.2",
                                                            "quantization_tolerance = 0.01")
    out = tmp_path / "strict"
    assert main(["run", "--config", write(tmp_path, strict), "--out", str(out)]) == 1
    assert json.loads((out / "manifest.json").read_text())["status"] == "acceptance_failed"
    assert main(["report", "--out", str(out)]) == 1


def test_buffer_writes_only_on_flush(tmp_path):
    buf = ArtifactBuffer(["csv", "json", "svg"])
    buf.table("t", ["a", "b"], [(1, 2.5), (2, -1e-20)])
    buf.summary("s", {"x": 1j})
    buf.plot("p", {"y": ([1, 2], [3, 4])})
    assert not any(tmp_path.iterdir())
    assert buf.flush(tmp_path) == ["p.svg", "s.json", "t.csv"]
    assert json.loads((tmp_path / "s.json").read_text()) == {"x": {"re": 0.0, "im": 1.0}}
    rows = list(csv.reader((tmp_path / "t.csv").read_text().splitlines()))
    assert rows[0] == ["a", "b"] and float(rows[2][1]) == -1e-20
    assert not list(tmp_path.glob("*.tmp"))


def test_formats_are_respected():
    buf = ArtifactBuffer(["json"])
    buf.table("t", ["a"], [(1,)])
    buf.plot("p", {"y": ([1, 2], [3, 4])})
    assert buf.files == {}


def test_svg_is_well_formed():
    text = svg_plot({"r": ([32, 64, 128], [1e-3, 2.5e-4, 6e-5]), "fit": ([32, 128], [1e-3, 6.2e-5])},
                    title="residual & fit", xlabel="tau", ylabel="r < 1", logx=True, logy=True)
    root = ET.fromstring(text)
    assert root.tag.endswith("svg")
    assert len([e for e in root.iter() if e.tag.endswith("polyline")]) == 2


def test_csv_round_trip_precision():
    text = csv_text(["x"], [(0.1 + 0.2,), (1 / 3,)])
    values = [float(r[0]) for r in list(csv.reader(text.splitlines()))[1:]]
    assert values == [0.1 + 0.2, 1 / 3]
