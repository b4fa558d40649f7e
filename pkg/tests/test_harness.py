import hashlib
import json
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

import forcetune.cli as cli
from forcetune.bo import BOSettings, Observation, TuningRun, run_continuous_bo
from forcetune.config import ConfigError, derive_seed, load, resolve
from forcetune.io import load_run, parse_observations, write_run
from forcetune.oracle import grid_search
from forcetune.plant import SimulationFault
from forcetune.sim import ProcessSetup

SVG = "{http://www.w3.org/2000/svg}"


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def short_cfg(tmp_path):
    return write_json(tmp_path / "c.json", {"total_s": 20, "window_s": 5, "ref_force_n": 0.4})


def test_default_budget_gives_sixty_rows(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"ref_force_n": 0.3})
    assert run_cli("tune", "--config", cfg, "--out", tmp_path / "o") == 0
    rows = (tmp_path / "o" / "tune_ref0.3N_run0.csv").read_text().splitlines()
    assert rows[0] == "window,kp,ki,kd,kdd,ref_force_n,objective,best_so_far"
    assert len(rows) == 61


def test_single_window_run(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"total_s": 10})
    assert run_cli("tune", "--config", cfg, "--out", tmp_path / "o") == 0
    assert len((tmp_path / "o" / "tune_ref0.3N_run0.csv").read_text().splitlines()) == 2


@pytest.mark.parametrize("command", ["tune", "simulate"])
def test_byte_identical_outputs(tmp_path, short_cfg, command):
    extra = ["--gains", 1, 20, 0, 0] if command == "simulate" else []
    for out in ("a", "b"):
        assert run_cli(command, "--config", short_cfg, "--seed", 7, "--out", tmp_path / out, *extra) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if not p.name.endswith(".meta.json"))
    assert files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_seed_override_changes_the_run(tmp_path, short_cfg):
    run_cli("tune", "--config", short_cfg, "--seed", 1, "--out", tmp_path / "a")
    run_cli("tune", "--config", short_cfg, "--seed", 2, "--out", tmp_path / "b")
    name = "tune_ref0.4N_run0.csv"
    assert (tmp_path / "a" / name).read_text() != (tmp_path / "b" / name).read_text()


def test_config_hash_matches_written_config(tmp_path, short_cfg):
    run_cli("tune", "--config", short_cfg, "--out", tmp_path / "o")
    digest = hashlib.sha256((tmp_path / "o" / "config.json").read_bytes()).hexdigest()
    summary = json.loads((tmp_path / "o" / "tune_ref0.4N_run0.summary.json").read_text())
    assert summary["config_sha256"] == digest
    assert set(summary) >= {"best_gains", "best_objective", "iterations_to_convergence", "normalized"}


def test_csv_round_trip(tmp_path):
    run = run_continuous_bo(
        ProcessSetup(), 0.3, seed=3, settings=BOSettings(window_s=2, total_s=10, restarts=2)
    )
    path = write_run(tmp_path, "r", run, "0" * 64)
    assert load_run(path).run.observations == run.observations


def test_parse_rejects_bad_header_and_rows():
    with pytest.raises(ValueError, match="header"):
        parse_observations("a,b\n1,2\n")
    good = "window,kp,ki,kd,kdd,ref_force_n,objective,best_so_far\n"
    with pytest.raises(ValueError, match=":2:"):
        parse_observations(good + "0,1,2,3,x,0.3,0.1,0.1\n")


def test_invalid_config_field_level_message(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"window_s": -1, "controller": {"u_max_mm_s": 0}})
    assert run_cli("tune", "--config", cfg, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "window_s" in err and "controller.u_max_mm_s" in err


@pytest.mark.parametrize(
    "bad, field",
    [
        ({"plant": {"time_constant_s": 0.001}}, "plant"),
        ({"initial_gains": [60, 0, 0, 0]}, "initial_gains"),
        ({"ref_force_n": 1.5}, "ref_force_n"),
        ({"toolpath": "missing.gcode"}, "toolpath"),
        ({"unknown_key": 1}, "unknown_key"),
        ({"total_s": 5, "window_s": 10}, "total_s"),
    ],
)
def test_config_errors_name_the_field(tmp_path, bad, field):
    with pytest.raises(ConfigError, match=field):
        resolve(bad, tmp_path)


def test_missing_and_malformed_config_files(tmp_path):
    assert run_cli("tune", "--config", tmp_path / "nope.json") == 2
    (tmp_path / "broken.json").write_text("{")
    assert run_cli("tune", "--config", tmp_path / "broken.json") == 2


def test_mode_must_match_command(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"mode": "tl", "total_s": 10})
    assert run_cli("tune", "--config", cfg, "--out", tmp_path / "o") == 2


def test_runtime_fault_exit_code(tmp_path, short_cfg, monkeypatch):
    def boom(*a, **k):
        raise SimulationFault("plant exploded")

    monkeypatch.setattr(cli, "run_continuous_bo", boom)
    assert run_cli("tune", "--config", short_cfg, "--out", tmp_path / "o") == 3


def test_seed_derivation():
    assert derive_seed(0, 0) == derive_seed(0, 0)
    assert len({derive_seed(0, i) for i in range(50)}) == 50
    assert derive_seed(1, 0) != derive_seed(0, 0)
    cfg = resolve({"seed": 5, "n_runs": 3})
    assert cfg.seeds == tuple(derive_seed(5, i) for i in range(3))
    assert resolve({"seeds": [4, 9]}).seeds == (4, 9)


def test_toolpath_file_relative_to_config(tmp_path):
    (tmp_path / "l.gcode").write_text("G1 X10 Y0 F6000\nG1 X10 Y10\n")
    cfg = load(write_json(tmp_path / "c.json", {"toolpath": "l.gcode"}))
    assert [e.time_s for e in cfg.setup.schedule.events] == pytest.approx([0.1])
    (tmp_path / "bad.gcode").write_text("G1 X1 Y1\n")
    with pytest.raises(ConfigError, match="no feed rate set"):
        load(write_json(tmp_path / "d.json", {"toolpath": "bad.gcode"}))


@pytest.fixture(scope="module")
def source_runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("sources")
    paths = {}
    for ref in (0.4, 0.3):
        cfg = write_json(d / f"c{ref}.json", {"total_s": 20, "window_s": 5, "ref_force_n": ref})
        assert run_cli("tune", "--config", cfg, "--out", d) == 0
        paths[ref] = d / f"tune_ref{ref:g}N_run0.csv"
    return paths


@pytest.mark.parametrize("refs, target", [((0.4,), 0.3), ((0.4, 0.3), 0.2)])
def test_tl_provenance(tmp_path, source_runs, refs, target):
    cfg = write_json(tmp_path / "t.json", {"mode": "tl", "total_s": 10, "window_s": 5, "ref_force_n": target})
    srcs = [source_runs[r] for r in refs]
    assert run_cli("tl-tune", "--config", cfg, "--out", tmp_path / "o", "--sources", *srcs) == 0
    summary = json.loads((tmp_path / "o" / f"tl_ref{target:g}N_run0.summary.json").read_text())
    tasks = summary["provenance"]["source_tasks"]
    assert len(tasks) == len(refs)
    assert [t["ref_force_n"] for t in tasks] == [[r] for r in refs]
    assert summary["normalized"] is True


def test_tl_deterministic(tmp_path, source_runs):
    cfg = write_json(tmp_path / "t.json", {"mode": "tl", "total_s": 15, "window_s": 5, "ref_force_n": 0.3})
    for out in ("a", "b"):
        run_cli("tl-tune", "--config", cfg, "--out", tmp_path / out, "--sources", source_runs[0.4])
    for name in ("tl_ref0.3N_run0.csv", "tl_ref0.3N_run0.summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_tl_without_sources_is_normalized_tune(tmp_path):
    body = {"total_s": 20, "window_s": 5, "ref_force_n": 0.3}
    cfg = write_json(tmp_path / "t.json", {**body, "mode": "tl"})
    assert run_cli("tl-tune", "--config", cfg, "--out", tmp_path / "o") == 0
    loaded = load_run(tmp_path / "o" / "tl_ref0.3N_run0.csv")
    plain = load(write_json(tmp_path / "p.json", body))
    expect = run_continuous_bo(
        plain.setup, 0.3, plain.space, plain.seeds[0], plain.settings, normalize_objective=True
    )
    assert loaded.run.observations == expect.observations


def test_missing_or_corrupt_source(tmp_path, source_runs):
    cfg = write_json(tmp_path / "t.json", {"mode": "tl", "total_s": 10})
    assert run_cli("tl-tune", "--config", cfg, "--sources", tmp_path / "none.csv", "--out", tmp_path / "o") == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("garbage\n")
    assert run_cli("tl-tune", "--config", cfg, "--sources", bad, "--out", tmp_path / "o") == 2
    # a CSV without its summary cannot say whether objectives are normalized
    orphan = tmp_path / "orphan.csv"
    orphan.write_text(source_runs[0.4].read_text())
    assert run_cli("tl-tune", "--config", cfg, "--sources", orphan, "--out", tmp_path / "o") == 2


def _fake_run(dirpath, stem, before, after, ref=0.3, normalized=False, n=5):
    objs = [before] + [max(before, after) * 1.5] * (n - 2) + [after]
    run = TuningRun([Observation(i, (0, 0, 0, 0), v, ref) for i, v in enumerate(objs)], ref, 0, normalized)
    return write_run(dirpath, stem, run, "0" * 64)


def _changes(text):
    return [float(m) for m in re.findall(r"\| ([+-]\d+\.\d)%", text)]


def test_report_before_after(tmp_path, capsys):
    a = _fake_run(tmp_path, "a", 0.289, 0.038, 0.2)
    b = _fake_run(tmp_path, "b", 0.200, 0.011, 0.4)
    c = _fake_run(tmp_path, "c", 0.05, 0.05)
    assert run_cli("report", a, b, c, "--out", tmp_path / "rep") == 0
    assert _changes(capsys.readouterr().out) == [-86.9, -94.5, 0.0]


def test_report_svg_has_one_polyline_per_run(tmp_path):
    paths = [_fake_run(tmp_path, f"r{k}", 0.1 + k, 0.05) for k in range(3)]
    assert run_cli("report", *paths, "--out", tmp_path / "rep") == 0
    root = ET.parse(tmp_path / "rep" / "convergence.svg").getroot()
    lines = root.findall(f".//{SVG}polyline")
    assert len(lines) == 3
    assert [ln.find(f"{SVG}title").text for ln in lines] == ["r0", "r1", "r2"]


def test_report_improvement_table(tmp_path, capsys):
    run = _fake_run(tmp_path, "tl", 0.05, 0.033, normalized=False)
    base = _fake_run(tmp_path, "notl", 0.05, 0.047, normalized=False)
    assert run_cli("report", run, "--baseline", base, "--out", tmp_path / "rep") == 0
    out = capsys.readouterr().out
    assert "Change against baselines" in out
    assert -29.8 in _changes(out)


def test_report_refuses_mixed_objectives(tmp_path, capsys):
    a = _fake_run(tmp_path, "a", 0.1, 0.05, normalized=False)
    b = _fake_run(tmp_path, "b", 0.3, 0.2, normalized=True)
    assert run_cli("report", a, b, "--out", tmp_path / "rep") == 2
    assert "mix" in capsys.readouterr().err
    assert run_cli("report", a, "--baseline", b, "--out", tmp_path / "rep") == 2


def _sim_rmse(tmp_path, body, gains):
    cfg = write_json(tmp_path / "s.json", body)
    assert run_cli("simulate", "--config", cfg, "--gains", *gains, "--out", tmp_path / "s") == 0
    ref = body["ref_force_n"]
    return json.loads((tmp_path / "s" / f"simulate_ref{ref:g}N.summary.json").read_text())


def test_simulate_open_loop_off(tmp_path):
    body = {"ref_force_n": 0.3, "total_s": 10, "plant": {"noise_std_n": 0}, "controller": {"u_ff_mode": "zero"}}
    s = _sim_rmse(tmp_path, body, [0, 0, 0, 0])
    assert s["window_rmse_n"] == [0.3]
    trace = np.loadtxt(tmp_path / "s" / "simulate_ref0.3N.csv", delimiter=",", skiprows=1)
    assert np.all(trace[:, 1] == 0)


def test_simulate_perfect_feedforward(tmp_path):
    (tmp_path / "line.gcode").write_text("G1 X1000 Y0 F6000\n")
    body = {"ref_force_n": 0.3, "total_s": 10, "plant": {"noise_std_n": 0}, "toolpath": "line.gcode"}
    assert _sim_rmse(tmp_path, body, [0, 0, 0, 0])["window_rmse_n"][0] < 1e-3


def test_simulate_grid_optimum(tmp_path):
    # the grid oracle is noise-free by construction
    best_gains, best = grid_search(ProcessSetup(), 0.3)
    body = {"ref_force_n": 0.3, "total_s": 10, "plant": {"noise_std_n": 0}}
    rmse = _sim_rmse(tmp_path, body, best_gains)["window_rmse_n"][0]
    assert abs(rmse - best) <= 0.1 * best
