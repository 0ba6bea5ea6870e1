import csv
import json
import math
import subprocess
import sys
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swdpll.cli import (
    CSV_HEADER,
    cmd_portrait,
    cmd_simulate,
    fmt,
    main,
    parse_trajectory_csv,
    run_single,
    trajectory_csv,
)
from swdpll.config import (
    EXIT_INVALID,
    EXIT_MISSING,
    EXIT_PARSE,
    ConfigError,
    PortraitGrid,
    config_from_dict,
    load_config,
)
from swdpll.model import LoopGains, PllState


def write_cfg(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config


def test_bundled_defaults():
    cfg = load_config("table4-defaults")
    g = cfg.gains
    assert (g.kp1n, g.ki1n, g.kp2n, g.ki2n, g.kp3n, g.ki3n, g.kd_init, g.beta) == (
        0.03, 0.007, 0.05, 0.003, 0.00006, 0.0000078, 64, 2,
    )
    assert (cfg.thresholds.phi_err_1, cfg.thresholds.phi_err_2) == (1.0, 0.01)
    assert cfg.portrait is not None and len(cfg.portrait.starts()) == 100


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError) as e:
        load_config(tmp_path / "nope.json")
    assert e.value.code == EXIT_MISSING
    assert main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_MISSING


def test_parse_error_reports_line(tmp_path):
    path = write_cfg(tmp_path, '{\n  "seed": 1,\n  oops\n}')
    with pytest.raises(ConfigError) as e:
        load_config(path)
    assert e.value.code == EXIT_PARSE and "line 3" in str(e.value)
    assert main(["verify", "--config", path, "--out", str(tmp_path)]) == EXIT_PARSE


@pytest.mark.parametrize(
    "obj,field",
    [
        ({"thresholds": {"phi_err_1": 0.005, "phi_err_2": 0.01}}, "thresholds"),
        ({"circuit": {"f_ref": -1.0}}, "circuit.f_ref"),
        ({"gains": {"kp3m": 0.1}}, "gains.kp3m"),
        ({"colour": 1}, "colour"),
        ({"gains": {"kd_init": 2.5}}, "gains.kd_init"),
        ({"gains": {"kp3n": "big"}}, "gains.kp3n"),
        ({"max_cycles": 0}, "max_cycles"),
        ({"fsm_exit_mode": "sometimes"}, "fsm_exit_mode"),
        ({"sweep": {"axes": [{"field": "gains.kp3n", "values": []}]}}, "sweep.axes[0].values"),
        ({"sweep": {"axes": [{"field": "gains.nope", "values": [1]}]}}, "sweep.axes[0].field"),
        ({"portrait": {"phi": [0.1]}}, "portrait.dphi_f"),
        ({"sim": {"force": "warp"}}, "sim.force"),
    ],
)
def test_validation_errors_name_the_field(tmp_path, obj, field):
    with pytest.raises(ConfigError) as e:
        config_from_dict(obj)
    assert e.value.code == EXIT_INVALID
    assert e.value.field_path.startswith(field)
    assert main(["simulate", "--config", write_cfg(tmp_path, obj), "--out", str(tmp_path)]) == EXIT_INVALID


def test_partial_config_falls_back_to_defaults():
    cfg = config_from_dict({"gains": {"kp3n": 0.001}, "initial": {"phi": 0.5}})
    assert cfg.gains.kp3n == 0.001 and cfg.gains.ki3n == 0.0000078
    assert cfg.initial == PllState(0.5, 0.05)


# ---------------------------------------------------------------- simulate


def test_simulate_outputs(tmp_path):
    assert main(["simulate", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "trajectory.csv").read_text()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    rows = parse_trajectory_csv(text)
    assert rows[0]["k"] == 0 and rows[-1]["mode"] == "BBPD"
    assert {r["mode"] for r in rows} <= {"LTI1", "LTI2", "FSM_INT", "FSM_DIFF", "BBPD"}
    assert any(r["switch"] == ("LTI1", "LTI2") for r in rows)
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["schema_version"] == "1"
    assert report["final_mode"] == "BBPD_NLTI" and report["diverged"] is False


def test_equilibrium_start_is_single_mode(tmp_path):
    assert main(["simulate", "--phi0", "0", "--dphi0", "0", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "trajectory.csv")
    assert {r["mode"] for r in rows} == {"BBPD"}
    assert all(r["switch"] == "" for r in rows)
    assert json.loads((tmp_path / "report.json").read_text())["settled_at"] < 20


def test_simulate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["simulate", "--noise", "--seed", "9", "--out", str(d)]) == 0
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_divergence_reported_with_exit_zero(tmp_path):
    path = write_cfg(tmp_path, {"gains": {"kp1n": 3.0}, "sim": {"force": "lti1"}, "max_cycles": 5000})
    assert main(["simulate", "--config", path, "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["diverged"] is True


def test_fsm_exit_flag_changes_run(tmp_path):
    main(["simulate", "--fsm-exit", "zero", "--out", str(tmp_path / "z")])
    main(["simulate", "--fsm-exit", "one", "--out", str(tmp_path / "o")])
    assert (tmp_path / "z" / "trajectory.csv").read_bytes() != (tmp_path / "o" / "trajectory.csv").read_bytes()


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=200)
@given(finite)
def test_float_format_round_trips(x):
    assert float(fmt(x)) == x


def test_csv_round_trip_matches_memory():
    cfg = load_config("table4-defaults")
    traj, _ = run_single(cfg, PllState(2.0, 0.05))
    rows = parse_trajectory_csv(trajectory_csv(traj))
    assert [r["phi"] for r in rows] == traj.phi
    assert [r["dphi_f"] for r in rows] == traj.dphi_f
    assert [r["v1"] for r in rows] == traj.v1
    assert [r["v3"] for r in rows] == traj.v3


# ---------------------------------------------------------------- portrait


def test_portrait_degenerate_grid_matches_simulate(tmp_path):
    cfg = replace(load_config("table4-defaults"), portrait=PortraitGrid((2.0,), (0.05,)))
    rows = cmd_portrait(cfg, tmp_path)
    rd = cmd_simulate(cfg, tmp_path)
    assert len(rows) == 1
    _, _, settled, chatter, final, rotation = rows[0]
    assert settled == ("" if rd["settled_at"] is None else rd["settled_at"])
    assert chatter == str(rd["chattering"]["chattering"]).lower()
    assert final == rd["final_mode"] and rotation == rd["rotation"]


def test_portrait_bbpd_only_wide_gains_clockwise(tmp_path):
    path = write_cfg(tmp_path, {
        "gains": {"kp3n": 0.001, "ki3n": 0.0005},
        "portrait": {"phi": {"min": -0.05, "max": 0.05, "n": 6}, "dphi_f": {"min": -0.01, "max": 0.01, "n": 6}},
        "sim": {"force": "bbpd"},
        "max_cycles": 500,
    })
    assert main(["portrait", "--config", path, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "portrait_summary.csv")
    assert len(rows) == 36
    assert {r["rotation"] for r in rows} == {"clockwise"}


def test_portrait_default_grid_parallel_matches_serial(tmp_path):
    assert main(["portrait", "--out", str(tmp_path / "s")]) == 0
    assert main(["portrait", "--jobs", "2", "--out", str(tmp_path / "p"), "--trajectories"]) == 0
    serial = (tmp_path / "s" / "portrait_summary.csv").read_bytes()
    assert serial == (tmp_path / "p" / "portrait_summary.csv").read_bytes()
    rows = read_csv(tmp_path / "s" / "portrait_summary.csv")
    assert len(rows) == 100 and all(r["chatter"] == "false" for r in rows)
    assert len(list((tmp_path / "p" / "trajectories").iterdir())) == 100


# ---------------------------------------------------------------- verify


def test_verify_certificates_for_defaults(tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    c = rep["checks"]
    for name in ("cqlf_form_positive_definite", "bbpd_form_positive_definite", "cqlf_certificate", "cqlf_search", "bbpd_bound"):
        assert c[name]["pass"], name
    lo, hi = c["bbpd_bound"]["interval"]
    assert lo == pytest.approx(1.5e-5, rel=0.01) and hi == pytest.approx(0.02, rel=0.01)
    assert rep["pass"] == all(ch["pass"] for ch in c.values())


def test_verify_defaults_all_checks_pass(tmp_path):
    main(["verify", "--out", str(tmp_path)])
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["pass"], {k: v["pass"] for k, v in rep["checks"].items()}


def test_verify_gain_outside_interval(tmp_path):
    path = write_cfg(tmp_path, {"gains": {"kp3n": 0.02, "ki3n": 0.01}})
    assert main(["verify", "--config", path, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["checks"]["bbpd_bound"]["correction"] == pytest.approx(0.05)
    assert rep["checks"]["bbpd_bound"]["pass"] is False and rep["pass"] is False


def test_verify_unstable_lti(tmp_path):
    path = write_cfg(tmp_path, {"gains": {"kp1n": 3.0}, "max_cycles": 200})
    assert main(["verify", "--config", path, "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "verify.json").read_text())["checks"]["cqlf_search"]
    assert s["pass"] is False and s["unstable"] == ["LTI1"]


# ---------------------------------------------------------------- design


def test_design_defaults(tmp_path):
    assert main(["design", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "design.json").read_text())
    assert 64 <= rep["lti2"]["kp"] <= 256
    assert rep["kd_init"]["kd_pick"] == 64
    assert rep["bbpd_ratio"]["pass"] is True
    assert all("source" in rep[k] for k in ("lti1", "lti2", "kd_init", "bbpd_ratio"))


def test_design_right_angle_phase_margin(tmp_path):
    path = write_cfg(tmp_path, {"design": {"lti2": {"pm_deg": 90.0}}})
    assert main(["design", "--config", path, "--out", str(tmp_path)]) == EXIT_INVALID


def test_design_kpfd_from_circuit(tmp_path):
    path = write_cfg(tmp_path, {"design": {"lti2": {"kpfd": None}}})
    assert main(["design", "--config", path, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "design.json").read_text())
    assert rep["lti2"]["kpfd"] == pytest.approx(500 / (2 * math.pi))


# ---------------------------------------------------------------- sweep


def test_sweep_trade_off_direction(tmp_path):
    path = write_cfg(tmp_path, {"initial": {"phi": 0.005, "dphi_f": 0.002}, "sim": {"force": "bbpd"}, "max_cycles": 20000})
    assert main(["sweep", "--config", path, "--axis", "kp3n=0.00006,0.001", "--out", str(tmp_path)]) == 0
    small, large = read_csv(tmp_path / "sweep.csv")
    assert float(small["kp3n"]) == 0.00006 and float(large["kp3n"]) == 0.001
    assert large["settled_at"] != ""
    assert small["settled_at"] == "" or int(small["settled_at"]) > int(large["settled_at"])
    assert float(large["final_v3"]) > float(small["final_v3"])


def test_sweep_errors(tmp_path):
    assert main(["sweep", "--axis", "kp3n=", "--out", str(tmp_path)]) == EXIT_INVALID
    assert main(["sweep", "--axis", "gains.warp=1", "--out", str(tmp_path)]) == EXIT_INVALID
    assert main(["sweep", "--axis", "kp3n=-1", "--out", str(tmp_path)]) == EXIT_INVALID


def test_sweep_single_value_matches_simulate(tmp_path):
    assert main(["sweep", "--axis", "gains.kp3n=0.00006", "--out", str(tmp_path)]) == 0
    (row,) = read_csv(tmp_path / "sweep.csv")
    cfg = load_config("table4-defaults")
    traj, rep = run_single(cfg, cfg.initial)
    assert row["settled_at"] == ("" if rep.settled_at is None else str(rep.settled_at))
    assert row["chatter"] == str(rep.chattering).lower()
    assert float(row["final_v3"]) == traj.v3[-1]


def test_two_axis_sweep_order(tmp_path):
    assert main(["sweep", "--axis", "kp3n=0.00006,0.0001", "--axis", "ki3n=0.0000078,0.00001", "--max-cycles", "300",
                 "--jobs", "2", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert [(float(r["kp3n"]), float(r["ki3n"])) for r in rows] == [
        (0.00006, 0.0000078), (0.00006, 0.00001), (0.0001, 0.0000078), (0.0001, 0.00001),
    ]


def test_console_script_runs(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "swdpll.cli", "design", "--out", str(tmp_path)], capture_output=True, text=True
    )
    assert out.returncode == 0 and (tmp_path / "design.json").exists()
