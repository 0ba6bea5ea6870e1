"""Command-line entry point: ``swdpll {simulate,portrait,verify,design,sweep}``.

All outputs are CSV or JSON files under ``--out``. Exit codes: 0 when the
analysis ran (negative verdicts included), 2 missing config, 3 parse error,
4 validation or domain error.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import design as gd
from .config import (
    DEFAULTS_NAME,
    EXIT_INVALID,
    SCHEMA_VERSION,
    ConfigError,
    RunConfig,
    SweepAxis,
    load_config,
    resolve_field,
    with_field,
)
from .lyapunov import (
    BBPD_FORM,
    CQLF_FORM,
    check_cqlf,
    is_positive_definite,
    lyapunov_difference,
    mlf_check,
    search_cqlf,
    spectral_radius,
)
from .model import DcoDisturbance, PllState, lti_matrix
from .sim import COMPOSITES, FORCE_CHOICES, SimReport, Trajectory, simulate

CSV_HEADER = ("k", "mode", "phi", "dphi_f", "kd", "ki_fsm", "v1", "v3", "switch")
PORTRAIT_HEADER = ("phi0", "dphi0", "settled_at", "chatter", "final_mode", "rotation")


def fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------- emitters


def trajectory_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for i in range(len(traj)):
        sw = traj.switch[i]
        w.writerow((
            traj.k[i], traj.step[i].value, fmt(traj.phi[i]), fmt(traj.dphi_f[i]), traj.kd[i], traj.ki_fsm[i],
            fmt(traj.v1[i]), fmt(traj.v3[i]), f"{sw[0].value}>{sw[1].value}" if sw else "",
        ))
    return buf.getvalue()


def parse_trajectory_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        out.append({
            "k": int(r["k"]), "mode": r["mode"], "phi": float(r["phi"]), "dphi_f": float(r["dphi_f"]),
            "kd": int(r["kd"]), "ki_fsm": int(r["ki_fsm"]), "v1": float(r["v1"]), "v3": float(r["v3"]),
            "switch": tuple(r["switch"].split(">")) if r["switch"] else None,
        })
    return out


def report_dict(report: SimReport) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "settled_at": report.settled_at,
        "diverged": report.diverged,
        "cycles": report.cycles,
        "final_mode": report.final_mode.value,
        "rotation": report.rotation.value,
        "chattering": {
            "chattering": report.chatter.chattering,
            "events": [{"k": k, "from": a.value, "to": b.value} for k, a, b in report.chatter.events],
        },
        "switch_on_traces": {
            sid: {"values": list(t.values), "cycles": list(t.cycles)} for sid, t in sorted(report.switch_on_traces.items())
        },
    }


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- runs


def run_single(cfg: RunConfig, x0: PllState, noise_label: str = "dco-noise") -> tuple[Trajectory, SimReport]:
    dist = DcoDisturbance(cfg.circuit.dco_noise_amplitude(), cfg.seed, noise_label) if cfg.noise_enabled else None
    return simulate(cfg.loop, cfg.thresholds, x0, cfg.max_cycles, dist, cfg.sim_options)


def _portrait_job(args):
    cfg, i, x0 = args
    traj, rep = run_single(cfg, x0, f"dco-noise/{i}")
    return traj, rep


def _summary_row(x0: PllState, rep: SimReport) -> tuple:
    return (
        fmt(x0.phi), fmt(x0.dphi_f), "" if rep.settled_at is None else rep.settled_at,
        str(rep.chattering).lower(), rep.final_mode.value, rep.rotation.value,
    )


def _pmap(fn, jobs: Sequence, workers: int) -> list:
    # results stay in input order whatever the completion order
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    traj, rep = run_single(cfg, cfg.initial)
    (out / "trajectory.csv").write_text(trajectory_csv(traj), encoding="utf-8")
    rd = report_dict(rep)
    _dump_json(rd, out / "report.json")
    return rd


def cmd_portrait(cfg: RunConfig, out: Path, workers: int = 1, trajectories: bool = False) -> list[tuple]:
    if cfg.portrait is None:
        raise ConfigError(EXIT_INVALID, "portrait grid is required", "portrait")
    starts = cfg.portrait.starts()
    results = _pmap(_portrait_job, [(cfg, i, x0) for i, x0 in enumerate(starts)], workers)
    rows = [_summary_row(x0, rep) for x0, (_, rep) in zip(starts, results)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PORTRAIT_HEADER)
    w.writerows(rows)
    (out / "portrait_summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    if trajectories:
        tdir = out / "trajectories"
        tdir.mkdir(exist_ok=True)
        for i, (traj, _) in enumerate(results):
            (tdir / f"start_{i:04d}.csv").write_text(trajectory_csv(traj), encoding="utf-8")
    return rows


def _quadform_dict(p) -> dict:
    return {"p11": p.p11, "p12": p.p12, "p22": p.p22}


def cmd_verify(cfg: RunConfig, out: Path) -> dict:
    g = cfg.gains
    mats = {"LTI1": lti_matrix(g.kp1n, g.ki1n), "LTI2": lti_matrix(g.kp2n, g.ki2n)}
    checks = {}
    checks["cqlf_form_positive_definite"] = {"pass": is_positive_definite(CQLF_FORM), "form": _quadform_dict(CQLF_FORM)}
    checks["bbpd_form_positive_definite"] = {"pass": is_positive_definite(BBPD_FORM), "form": _quadform_dict(BBPD_FORM)}
    checks["cqlf_certificate"] = {
        "pass": check_cqlf(CQLF_FORM, list(mats.values())),
        "matrices": {
            name: {
                "spectral_radius": spectral_radius(a),
                "max_eigenvalue_of_difference": float(np.max(np.linalg.eigvalsh(lyapunov_difference(CQLF_FORM, a)))),
            }
            for name, a in mats.items()
        },
    }
    res = search_cqlf(list(mats.values()), budget=cfg.cqlf_budget, seed=cfg.seed)
    checks["cqlf_search"] = {
        "pass": res.found,
        "form": _quadform_dict(res.form) if res.found else None,
        "candidates_tried": res.candidates_tried,
        "unstable": [list(mats)[i] for i in res.unstable],
    }
    e2 = cfg.thresholds.phi_err_2
    c = g.reversal_correction
    try:
        lo, hi = gd.bbpd_lyapunov_bound(BBPD_FORM, e2, e2)
        checks["bbpd_bound"] = {"pass": lo < c < hi, "point": [e2, e2], "interval": [lo, hi], "correction": c}
    except gd.NoStabilizingGainError as exc:
        checks["bbpd_bound"] = {"pass": False, "point": [e2, e2], "interval": None, "correction": c, "reason": str(exc)}
    _, rep = run_single(cfg, cfg.initial)
    subs = {}
    for sid in COMPOSITES:
        t = rep.switch_on_traces.get(sid)
        if t is None:
            subs[sid] = {"pass": True, "samples": 0, "violations": []}
            continue
        m = mlf_check(t)
        subs[sid] = {"pass": m.passed, "samples": len(t.values), "violations": list(m.violations)}
    checks["mlf"] = {
        "pass": all(s["pass"] for s in subs.values()),
        "initial": [cfg.initial.phi, cfg.initial.dphi_f],
        "subsystems": subs,
    }
    report = {"schema_version": SCHEMA_VERSION, "pass": all(ch["pass"] for ch in checks.values()), "checks": checks}
    _dump_json(report, out / "verify.json")
    return report


def _design_target(cfg: RunConfig, name: str) -> dict:
    t = getattr(cfg.design, name)
    c = cfg.circuit
    path = f"design.{name}"
    dt = c.dt_tdc_counter if t.tdc == "counter" else c.dt_tdc_delayline
    try:
        kpfd_value = t.kpfd if t.kpfd is not None else gd.kpfd(c.t_ref, dt)
        spec = gd.LtiDesignSpec(math.radians(t.pm_deg), t.ugbw, t.omega_z, t.loop_delay)
        kp, ki = gd.design_lti_gains(spec, kpfd_value, c)
    except gd.DomainError as exc:
        raise ConfigError(EXIT_INVALID, str(exc), path) from None
    kpn, kin = gd.normalize_gains(kp, ki, kpfd_value, c)
    return {
        "source": "PI gains from phase margin and unity-gain bandwidth",
        "pm_deg": t.pm_deg,
        "ugbw": t.ugbw,
        "kpfd": kpfd_value,
        "kpfd_source": "config" if t.kpfd is not None else f"circuit ({t.tdc} resolution)",
        "kp": kp,
        "ki": ki,
        "kpn": kpn,
        "kin": kin,
    }


def cmd_design(cfg: RunConfig, out: Path) -> dict:
    g = cfg.gains
    d = cfg.design
    report = {"schema_version": SCHEMA_VERSION, "lti1": _design_target(cfg, "lti1"), "lti2": _design_target(cfg, "lti2")}
    try:
        kd = gd.kd_init_range(g.kp3n, g.ki3n, d.kd_residual[0], d.kd_residual[1], g.beta, d.kd_target)
    except gd.DomainError as exc:
        raise ConfigError(EXIT_INVALID, str(exc), "design.kd_residual") from None
    report["kd_init"] = {"source": "residual range of the derivative kick", "residual": list(d.kd_residual), **kd._asdict()}
    r = d.bbpd_ratio
    try:
        bound = gd.bbpd_ratio_bound(r.omega_u, cfg.circuit.t_ref, r.loop_delay, math.radians(r.pm_deg))
    except gd.DomainError as exc:
        raise ConfigError(EXIT_INVALID, str(exc), "design.bbpd_ratio") from None
    ratio = g.kp3n / g.ki3n
    report["bbpd_ratio"] = {
        "source": "bang-bang gain ratio bound with loop delay",
        "bound": bound,
        "configured_ratio": ratio,
        "pass": ratio >= bound,
    }
    _dump_json(report, out / "design.json")
    return report


def _sweep_job(args):
    cfg, names, values = args
    for n, v in zip(names, values):
        cfg = with_field(cfg, n, v)
    cfg.validate()
    traj, rep = run_single(cfg, cfg.initial)
    return values, rep.settled_at, rep.chattering, traj.v3[-1]


def cmd_sweep(cfg: RunConfig, out: Path, workers: int = 1) -> list[tuple]:
    if not cfg.sweep:
        raise ConfigError(EXIT_INVALID, "no sweep axes configured", "sweep.axes")
    names = [a.field for a in cfg.sweep]
    combos = list(itertools.product(*(a.values for a in cfg.sweep)))
    for combo in combos:
        probe = cfg
        for n, v in zip(names, combo):
            probe = with_field(probe, n, v)
        probe.validate()
    results = _pmap(_sweep_job, [(cfg, names, c) for c in combos], workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((*names, "settled_at", "chatter", "final_v3"))
    rows = []
    for values, settled, chatter, v3 in results:
        row = (*(fmt(v) for v in values), "" if settled is None else settled, str(chatter).lower(), fmt(v3))
        rows.append(row)
        w.writerow(row)
    (out / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    return rows


# ---------------------------------------------------------------- argparse


def _parse_axis(text: str) -> SweepAxis:
    name, sep, vals = text.partition("=")
    if not sep:
        raise ConfigError(EXIT_INVALID, f"expected FIELD=v1,v2,... got {text!r}", "--axis")
    resolve_field(name, "--axis")
    try:
        values = tuple(float(v) for v in vals.split(",") if v.strip())
    except ValueError:
        raise ConfigError(EXIT_INVALID, f"non-numeric value in {vals!r}", "--axis") from None
    if not values:
        raise ConfigError(EXIT_INVALID, f"empty value list for {name}", "--axis")
    return SweepAxis(name, values)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULTS_NAME, help=f"JSON config path (default: bundled {DEFAULTS_NAME})")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--max-cycles", type=int, default=None)
    common.add_argument("--noise", action="store_true", help="enable the DCO disturbance")
    common.add_argument("--fsm-exit", choices=("zero", "one"), default=None)
    common.add_argument("--rearm", action="store_true", help="allow leaving BBPD_NLTI")
    common.add_argument("--force", choices=FORCE_CHOICES, default=None, help="pin a single subsystem")

    p = argparse.ArgumentParser(prog="swdpll", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="single trajectory CSV and report JSON")
    s.add_argument("--phi0", type=float, default=None)
    s.add_argument("--dphi0", type=float, default=None)
    s = sub.add_parser("portrait", parents=[common], help="grid of starts, one summary row each")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--trajectories", action="store_true", help="also write every trajectory")
    sub.add_parser("verify", parents=[common], help="Lyapunov certificates and MLF check")
    sub.add_parser("design", parents=[common], help="loop gains from design targets")
    s = sub.add_parser("sweep", parents=[common], help="settling over one or two parameter axes")
    s.add_argument("--axis", action="append", default=None, metavar="FIELD=v1,v2", help="replaces config axes")
    s.add_argument("--jobs", type=int, default=1)
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.max_cycles is not None:
        upd["max_cycles"] = args.max_cycles
    if args.noise:
        upd["noise_enabled"] = True
    if args.fsm_exit is not None:
        upd["fsm_exit_mode"] = "at_zero" if args.fsm_exit == "zero" else "at_one"
    if args.out is not None:
        upd["out_dir"] = args.out
    sim = cfg.sim
    if args.rearm:
        sim = replace(sim, rearm=True)
    if args.force is not None:
        sim = replace(sim, force=args.force)
    upd["sim"] = sim
    if getattr(args, "phi0", None) is not None or getattr(args, "dphi0", None) is not None:
        upd["initial"] = PllState(
            cfg.initial.phi if args.phi0 is None else args.phi0,
            cfg.initial.dphi_f if args.dphi0 is None else args.dphi0,
        )
    if getattr(args, "axis", None):
        upd["sweep"] = tuple(_parse_axis(a) for a in args.axis)
    cfg = replace(cfg, **upd)
    cfg.validate()
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            rd = cmd_simulate(cfg, out)
            print(f"simulate: {rd['cycles']} cycles, settled_at={rd['settled_at']}, final={rd['final_mode']} -> {out}")
        elif args.command == "portrait":
            rows = cmd_portrait(cfg, out, args.jobs, args.trajectories)
            print(f"portrait: {len(rows)} starts -> {out / 'portrait_summary.csv'}")
        elif args.command == "verify":
            rep = cmd_verify(cfg, out)
            print(f"verify: pass={str(rep['pass']).lower()} -> {out / 'verify.json'}")
        elif args.command == "design":
            cmd_design(cfg, out)
            print(f"design -> {out / 'design.json'}")
        else:
            rows = cmd_sweep(cfg, out, args.jobs)
            print(f"sweep: {len(rows)} rows -> {out / 'sweep.csv'}")
    except ConfigError as exc:
        print(f"swdpll: error: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
