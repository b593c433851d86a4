"""Scenario-driven command line frontend.

A scenario is a TOML file naming one task and its parameters::

    task = "flow"
    seed = 0

    [hamiltonian]
    expression = "(p1^2 + p2^2)/2 - 1/2"
    n = 2

    [params]
    x0 = [0, 0, 1, 0]
    window = [0, 10]

``podex run FILE`` writes JSON, CSV and PNG reports; ``podex validate FILE``
only resolves the configuration.  Exit status is 0 on success, 2 for
configuration errors and 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import expr as ex
from .contact import (ChartError, NegativeHamiltonianError, SingularSystemError, TransversalityError,
                      autonomy_residual, build_radial_chart, jet_map_submersivity_check,
                      random_target_jet, realize_jet_hamiltonian)
from .flow import ShootingError, FlowError, integrate, shoot_chord
from .hamsys import (CAPTURE_RADIUS, LEVEL_TOL, SUBMERSION_TOL, CertificationError, HamiltonianModel,
                     certify_level_point)
from .heart import heart_fiber_scan
from .homopode import (AMBIGUOUS, AMBIGUITY_FACTOR, DEDUP_EPS, DIAG_MARGIN, RANK_TOL, SOLVE_TOL,
                       AlignmentError, DiagonalError, NoConvergence, formula_dimension, scan_homopodal)
from .models import MODELS
from .perturb import (CLEARANCE_MIN, PlanError, ResolutionError, bump_perturb, resolve_intersection)
from .subjets import (AXIS_MARGIN, JET_TOL, K_MAX, AxisMarginError, ChartMismatchError, CurveJet,
                      align_jets, dense_isolation_check, find_intersections, isolation_radius, jet_derivative_bound,
                      project_jet, tangency_order)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
OUT_ENV = "PODEX_OUT"

NUMERICAL_ERRORS = (FlowError, ShootingError, CertificationError, NoConvergence, DiagonalError,
                    AlignmentError, ChartError, SingularSystemError, TransversalityError,
                    NegativeHamiltonianError, PlanError, ResolutionError, AxisMarginError,
                    ChartMismatchError, ex.DomainError, np.linalg.LinAlgError)

TOLERANCES = {
    "level_tol": LEVEL_TOL, "submersion_tol": SUBMERSION_TOL, "capture_radius": CAPTURE_RADIUS,
    "drift_tol": 1e-9, "step_tol": 1e-16, "chord_tol": 1e-10, "axis_margin": AXIS_MARGIN,
    "jet_tol": JET_TOL, "solve_tol": SOLVE_TOL, "diag_margin": DIAG_MARGIN, "rank_tol": RANK_TOL,
    "ambiguity_factor": AMBIGUITY_FACTOR, "dedup_eps": DEDUP_EPS, "clearance_min": CLEARANCE_MIN,
    "h_min": 0.1, "verify_tol": 1e-8,
}


class ConfigError(ValueError):
    """The scenario file is malformed or inconsistent."""


REQUIRED = object()

TASK_DEFAULTS: dict[str, dict] = {
    "flow": {"x0": REQUIRED, "window": [0.0, 10.0], "order": 12, "max_step": 0.0},
    "chord": {"q_a": REQUIRED, "q_b": REQUIRED, "p_guess": REQUIRED, "T_guess": REQUIRED,
              "max_iter": 30},
    "jets": {"points": REQUIRED, "k": 3, "axis": 0},
    "intersections": {"orbits": REQUIRED, "step": 1e-2, "k": 3, "k_max": K_MAX, "samples": 10000},
    "homopode-scan": {"k": 1, "strategy": "antipodal", "budget": 1000, "box": None,
                      "max_pairs": 0, "jitter": 0.05, "max_iter": 40},
    "dimension": {"ks": [1, 2, 3], "strategy": "antipodal", "budget": 1000, "box": None,
                  "max_pairs": 50, "bump_amplitude": 1e-2, "bump_radius": 2.0, "bump_seed": 1},
    "heart": {"b": 0.7, "q": [0.0, 0.0], "grid": 256, "link_factor": 3.0},
    "realize-jet": {"center": REQUIRED, "P": None, "chart_box": None, "k": 2, "count": 10, "scale": 0.2,
                    "targets": [], "submersivity": False},
    "resolve": {"orbits": REQUIRED, "q_star": REQUIRED, "target": 0, "angle_samples": 64,
                "r0": 0.0, "eps": 0.0},
}


# ------------------------------------------------------------------ config

def _fail(msg):
    raise ConfigError(msg)


def load_scenario(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        _fail(f"cannot read scenario: {exc}")
    except tomllib.TOMLDecodeError as exc:
        _fail(f"scenario is not valid TOML: {exc}")


def resolve_config(raw: dict, seed: int | None = None, out: str | None = None) -> dict:
    """Scenario with every default materialized."""
    if not isinstance(raw, dict):
        _fail("scenario must be a table")
    task = raw.get("task")
    if task not in TASK_DEFAULTS:
        _fail(f"unknown task {task!r}; expected one of {sorted(TASK_DEFAULTS)}")
    unknown = set(raw) - {"task", "seed", "name", "hamiltonian", "tolerances", "params", "output"}
    if unknown:
        _fail(f"unknown top-level keys {sorted(unknown)}")
    cfg = {"task": task, "name": str(raw.get("name", task)),
           "seed": int(seed if seed is not None else raw.get("seed", 0))}
    ham = dict(raw.get("hamiltonian", {}))
    if task == "heart" and not ham:
        ham = {"model": "heart"}
    if "expression" in ham and "model" in ham:
        _fail("give either hamiltonian.expression or hamiltonian.model, not both")
    if "model" in ham:
        if ham["model"] not in MODELS:
            _fail(f"unknown model {ham['model']!r}; expected one of {sorted(MODELS)}")
        ham.setdefault("params", {})
        if ham["model"] == "heart":
            ham["n"] = 2
    elif "expression" not in ham:
        _fail("hamiltonian.expression (or hamiltonian.model) is required")
    ham.setdefault("n", 2)
    ham.setdefault("periods", [])
    ham.setdefault("name", ham.get("model", "H"))
    bump = ham.get("bump")
    if bump is not None:
        bump = {"amplitude": 1e-2, "radius": 2.0, "seed": 0, "center": None, **bump}
        ham["bump"] = bump
    cfg["hamiltonian"] = ham
    tol = dict(TOLERANCES)
    for k, v in raw.get("tolerances", {}).items():
        if k not in TOLERANCES:
            _fail(f"unknown tolerance {k!r}")
        tol[k] = float(v)
    cfg["tolerances"] = tol
    params = {}
    given = dict(raw.get("params", {}))
    for k, v in TASK_DEFAULTS[task].items():
        if k in given:
            params[k] = given.pop(k)
        elif v is REQUIRED:
            _fail(f"task {task!r} needs params.{k}")
        else:
            params[k] = copy.deepcopy(v)
    if given:
        _fail(f"unknown params for task {task!r}: {sorted(given)}")
    cfg["params"] = params
    output = {"dir": ".", "prefix": cfg["name"], "figures": True}
    extra = set(raw.get("output", {})) - set(output)
    if extra:
        _fail(f"unknown output keys: {sorted(extra)}")
    output.update(raw.get("output", {}))
    env = os.environ.get(OUT_ENV)
    if env:
        output["dir"] = env
    if out is not None:
        output["dir"] = out
    cfg["output"] = output
    return cfg


def build_hamiltonian(ham: dict) -> HamiltonianModel:
    n = int(ham["n"])
    if "model" in ham:
        H = MODELS[ham["model"]](**ham.get("params", {})) if ham["model"] == "heart" \
            else MODELS[ham["model"]](n, **ham.get("params", {}))
    else:
        periods = ham.get("periods") or None
        H = HamiltonianModel(ham["expression"], n, ham.get("name", "H"), periods)
    bump = ham.get("bump")
    if bump:
        H = bump_perturb(H, bump.get("center"), float(bump["amplitude"]), float(bump["radius"]),
                         int(bump["seed"]))
    return H


def _vec(x, size, what):
    try:
        a = np.asarray(x, float)
    except (TypeError, ValueError):
        _fail(f"{what} must be numeric")
    if a.shape != (size,):
        _fail(f"{what} must have length {size}, got shape {a.shape}")
    return a


def _box(box, n):
    if box is None:
        return [[-1.0, 1.0]] * n
    if len(box) != n or any(len(b) != 2 or b[0] >= b[1] for b in box):
        _fail(f"box must list {n} intervals [lo, hi] with lo < hi")
    return [[float(b[0]), float(b[1])] for b in box]


def check_params(cfg: dict, H: HamiltonianModel) -> None:
    """Shape checks that need the base dimension; fills in derived defaults."""
    n = H.n
    p = cfg["params"]
    t = cfg["task"]
    if t == "flow":
        _vec(p["x0"], 2 * n, "params.x0")
        _vec(p["window"], 2, "params.window")
    elif t == "chord":
        _vec(p["q_a"], n, "params.q_a")
        _vec(p["q_b"], n, "params.q_b")
        _vec(p["p_guess"], n, "params.p_guess")
    elif t == "jets":
        pts = np.asarray(p["points"], float)
        if pts.ndim != 2 or pts.shape[1] != 2 * n:
            _fail(f"params.points must be a list of {2 * n}-vectors")
        if not 0 <= int(p["k"]) <= K_MAX:
            _fail(f"params.k must lie in [0, {K_MAX}]")
    elif t in ("intersections", "resolve"):
        if not isinstance(p["orbits"], list) or len(p["orbits"]) < 2:
            _fail("params.orbits must list at least two orbits")
        for i, o in enumerate(p["orbits"]):
            if not isinstance(o, dict) or "x0" not in o:
                _fail(f"params.orbits[{i}] needs x0")
            _vec(o["x0"], 2 * n, f"params.orbits[{i}].x0")
            o.setdefault("window", [0.0, 1.0])
            _vec(o["window"], 2, f"params.orbits[{i}].window")
        if t == "resolve":
            _vec(p["q_star"], n, "params.q_star")
    elif t in ("homopode-scan", "dimension"):
        p["box"] = _box(p["box"], n)
        if p["strategy"] not in ("uniform", "fiber", "antipodal"):
            _fail(f"unknown seed strategy {p['strategy']!r}")
    elif t == "heart":
        if n != 2:
            _fail("the heart task needs n = 2")
        _vec(p["q"], 2, "params.q")
    elif t == "realize-jet":
        _vec(p["center"], 2 * n, "params.center")
        if p["P"] is not None:
            _vec(p["P"], n, "params.P")
        if p["chart_box"] is not None:
            p["chart_box"] = _box(p["chart_box"], 2 * n - 1)


def prepare(path, seed=None, out=None):
    raw = load_scenario(path)
    cfg = resolve_config(raw, seed, out)
    try:
        H = build_hamiltonian(cfg["hamiltonian"])
    except ex.ParseError as exc:
        raise ConfigError(f"hamiltonian expression: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"hamiltonian: {exc}") from None
    check_params(cfg, H)
    cfg["hamiltonian"]["resolved_expression"] = str(H)
    return cfg, H


# ------------------------------------------------------------------ reports

def _json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return o


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata={"Software": None})
    _figure().close(fig)
    return buf.getvalue()


# ------------------------------------------------------------------- tasks

def task_flow(cfg, H):
    p, tol = cfg["params"], cfg["tolerances"]
    x0 = certify_level_point(H, np.asarray(p["x0"], float), tol["level_tol"], tol["submersion_tol"],
                             tol["capture_radius"])
    orbit = integrate(H, x0.z, p["window"], order=int(p["order"]), drift_tol=tol["drift_tol"],
                      step_tol=tol["step_tol"], max_step=(p["max_step"] or None),
                      submersion_tol=tol["submersion_tol"])
    summary = {"config": cfg, "steps": len(orbit) - 1, "max_energy_residual": orbit.max_residual,
               "start": orbit.z[0], "end": orbit.z[-1], "window": list(orbit.window)}
    files = {"orbit.csv": orbit.to_csv(), "summary.json": _json(summary)}
    if cfg["output"]["figures"]:
        plt = _figure()
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.plot(orbit.z[:, 0], orbit.z[:, 1], lw=1)
        ax.set_xlabel("q1")
        ax.set_ylabel("q2")
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_title("projected orbit")
        files["orbit.png"] = _png(fig)
    return files


def task_chord(cfg, H):
    p, tol = cfg["params"], cfg["tolerances"]
    ch = shoot_chord(H, np.asarray(p["q_a"], float), np.asarray(p["q_b"], float),
                     np.asarray(p["p_guess"], float), float(p["T_guess"]), chord_tol=tol["chord_tol"],
                     max_iter=int(p["max_iter"]))
    orbit = ch.orbit
    summary = {"config": cfg, "p_start": ch.p_start, "duration": ch.duration, "residual": ch.residual,
               "iterations": ch.iterations, "end": orbit.z[-1]}
    files = {"chord.csv": orbit.to_csv(), "summary.json": _json(summary)}
    if cfg["output"]["figures"]:
        plt = _figure()
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.plot(orbit.z[:, 0], orbit.z[:, 1], lw=1)
        ax.plot(*np.asarray(p["q_a"], float)[:2], "go")
        ax.plot(*np.asarray(p["q_b"], float)[:2], "rs")
        ax.set_xlabel("q1")
        ax.set_ylabel("q2")
        ax.set_title("chord")
        files["chord.png"] = _png(fig)
    return files


def _axis_param(a):
    return None if a in (None, 0, "auto") else int(a) - 1


def task_jets(cfg, H):
    p, tol = cfg["params"], cfg["tolerances"]
    k = int(p["k"])
    records, rows = [], []
    for i, z in enumerate(np.asarray(p["points"], float)):
        x = certify_level_point(H, z, tol["level_tol"], tol["submersion_tol"], tol["capture_radius"])
        j = project_jet(H, x.z, k, _axis_param(p["axis"]), tol["axis_margin"])
        records.append({"index": i, "point": x.z, **j.to_record()})
        for order, row in enumerate(j.all_coeffs):
            for c, v in enumerate(row):
                rows.append([i, j.axis + 1, order, c + 1, float(v)])
    files = {"jets.json": _json({"config": cfg, "jets": records}),
             "jets.csv": _csv(["point", "axis", "order", "component", "value"], rows)}
    return files


def task_intersections(cfg, H):
    p, tol = cfg["params"], cfg["tolerances"]
    orbits = [integrate(H, np.asarray(o["x0"], float), o["window"], drift_tol=tol["drift_tol"])
              for o in p["orbits"]]
    found = []
    rows = []
    for a in range(len(orbits)):
        for b in range(a + 1, len(orbits)):
            for it in find_intersections(orbits[a], orbits[b], float(p["step"])):
                z1, z2 = orbits[a].evaluate(it.t1), orbits[b].evaluate(it.t2)
                rec = {"orbits": [a, b], "t1": it.t1, "t2": it.t2, "point": it.point,
                       "distance": it.distance}
                try:
                    j1, j2 = align_jets(H, z1, z2, int(p["k"]), tol["axis_margin"])
                    r = tangency_order(j1, j2, int(p["k_max"]), tol["jet_tol"])
                    rec["axis"] = j1.axis + 1
                    rec["order"] = r
                    if 1 <= r <= int(p["k"]) - 1:
                        M = jet_derivative_bound(H, np.vstack([z1, z2]), j1.axis, r + 1)
                        rad = isolation_radius(j1, j2, r, M, window=1.0)
                        rec["isolation_radius"] = rad
                        rec["dense_check"] = dense_isolation_check(orbits[a], orbits[b], it.t1, it.t2,
                                                                   j1, j2, r, rad, int(p["samples"]))
                except ChartMismatchError as exc:
                    rec["order"] = None
                    rec["note"] = f"no common graph axis: {exc}"
                found.append(rec)
                rows.append([a, b, it.t1, it.t2, *map(float, it.point), rec.get("order"),
                             rec.get("isolation_radius", "")])
    n = H.n
    files = {"intersections.json": _json({"config": cfg, "intersections": found}),
             "intersections.csv": _csv(["orbit_a", "orbit_b", "t1", "t2"] + [f"q{i + 1}" for i in range(n)]
                                       + ["order", "isolation_radius"], rows)}
    if cfg["output"]["figures"]:
        plt = _figure()
        fig, ax = plt.subplots(figsize=(5, 5))
        for o in orbits:
            ax.plot(o.z[:, 0], o.z[:, 1], lw=1)
        for rec in found:
            ax.plot(rec["point"][0], rec["point"][1], "kx")
        ax.set_xlabel("q1")
        ax.set_ylabel("q2")
        ax.set_title("projected orbits and intersections")
        files["intersections.png"] = _png(fig)
    return files


def _scan(H, k, p, cfg, threads, budget=None, max_pairs=None):
    tol = cfg["tolerances"]
    return scan_homopodal(H, k, p["strategy"], int(budget or p["budget"]), p["box"], cfg["seed"],
                          tol["solve_tol"], tol["diag_margin"], tol["dedup_eps"], tol["rank_tol"],
                          tol["ambiguity_factor"], threads=threads,
                          max_pairs=(max_pairs or None), jitter=float(p.get("jitter", 0.05)),
                          max_iter=int(p.get("max_iter", 40)))


def task_homopode_scan(cfg, H, threads=1):
    p = cfg["params"]
    rep = _scan(H, int(p["k"]), p, cfg, threads, max_pairs=int(p["max_pairs"]))
    d = rep.to_dict(include_runtime=False)
    d["scenario"] = cfg
    d["formula_dimension"] = formula_dimension(H.n, int(p["k"]))
    files = {"scan.json": _json(d), "scan.csv": rep.to_csv()}
    if cfg["output"]["figures"] and rep.pairs:
        plt = _figure()
        fig, ax = plt.subplots(figsize=(5, 5))
        q = np.array([pr.x1.q for pr in rep.pairs])
        col = ["tab:red" if pr.flavor == "anti" else "tab:blue" for pr in rep.pairs]
        ax.scatter(q[:, 0], q[:, 1], c=col, s=8)
        ax.set_xlabel("q1")
        ax.set_ylabel("q2")
        ax.set_title(f"order {p['k']} homopodal pairs (base points)")
        files["scan.png"] = _png(fig)
    return files


def dimension_report(cfg, H, threads=1) -> dict:
    """Dimension table for the scenario Hamiltonian and a bump-perturbed copy."""
    p = cfg["params"]
    Hb = bump_perturb(H, None, float(p["bump_amplitude"]), float(p["bump_radius"]), int(p["bump_seed"]))
    rows = []
    for label, model in (("scenario", H), ("bump_perturbed", Hb)):
        for k in p["ks"]:
            rep = _scan(model, int(k), p, cfg, threads, max_pairs=int(p["max_pairs"]))
            dims = [d for d in rep.dims() if d != AMBIGUOUS]
            f = formula_dimension(H.n, int(k))
            mean = float(np.mean(dims)) if dims else None
            rows.append({
                "hamiltonian": label, "k": int(k), "n": H.n, "formula": f, "found": len(rep.pairs),
                "mean_est_dim": mean, "min_est_dim": min(dims) if dims else None,
                "max_est_dim": max(dims) if dims else None,
                "ambiguous": sum(1 for d in rep.dims() if d == AMBIGUOUS),
                "matches_formula": (bool(dims) and all(d == f for d in dims)) if f >= 0 else not rep.pairs,
                "non_generic": bool(dims) and any(d != f for d in dims),
                "certificate": rep.certificate,
            })
    return {"config": cfg, "table": rows}


def task_dimension(cfg, H, threads=1):
    rep = dimension_report(cfg, H, threads)
    cols = ["hamiltonian", "k", "n", "formula", "found", "mean_est_dim", "ambiguous", "matches_formula",
            "non_generic"]
    rows = [[r[c] if r[c] is not None else "" for c in cols] for r in rep["table"]]
    files = {"dimension.json": _json(rep), "dimension.csv": _csv(cols, rows)}
    if cfg["output"]["figures"]:
        plt = _figure()
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, mk in (("scenario", "o"), ("bump_perturbed", "s")):
            pts = [(r["k"], r["mean_est_dim"]) for r in rep["table"]
                   if r["hamiltonian"] == label and r["mean_est_dim"] is not None]
            if pts:
                ax.plot(*zip(*pts), mk, label=label)
        ks = sorted({r["k"] for r in rep["table"]})
        ax.plot(ks, [formula_dimension(H.n, k) for k in ks], "k--", label="(3-k)(n-1)+1")
        ax.set_xlabel("k")
        ax.set_ylabel("estimated dimension")
        ax.legend()
        files["dimension.png"] = _png(fig)
    return files


def task_heart(cfg, H):
    p, tol = cfg["params"], cfg["tolerances"]
    if "model" in cfg["hamiltonian"] and cfg["hamiltonian"]["model"] == "heart" \
            and "b" not in cfg["hamiltonian"].get("params", {}):
        H = MODELS["heart"](float(p["b"]))
    scan = heart_fiber_scan(H, p["q"], 1, int(p["grid"]), tol["diag_margin"], tol["verify_tol"],
                            float(p["link_factor"]), tol["rank_tol"])
    d = scan.to_dict(include_runtime=False)
    d["scenario"] = cfg
    files = {"heart.json": _json(d), "heart.csv": scan.to_csv()}
    if cfg["output"]["figures"]:
        plt = _figure()
        fig, axs = plt.subplots(1, 2, figsize=(10, 5))
        phi = np.linspace(0, 2 * np.pi, 400)
        from .heart import fiber_curve
        Z = fiber_curve(H, np.asarray(p["q"], float), phi)
        axs[0].plot(Z[:, 2], Z[:, 3], "k-", lw=1)
        for inf in scan.inflections:
            z = fiber_curve(H, np.asarray(p["q"], float), [inf["phi"]])[0]
            axs[0].plot(z[2], z[3], "go")
        for par in scan.parallels:
            z = fiber_curve(H, np.asarray(p["q"], float), [par["phi"]])[0]
            axs[0].plot(z[2], z[3], "ro")
        axs[0].set_aspect("equal")
        axs[0].set_title("fiber")
        m = ~scan.closure
        for c in range(scan.component_count):
            sel = m & (scan.component == c)
            axs[1].scatter(scan.phi1[sel], scan.phi2[sel], s=2, label=f"{scan.components[c]['flavor']} #{c}")
        axs[1].set_xlim(0, 2 * np.pi)
        axs[1].set_ylim(0, 2 * np.pi)
        axs[1].set_aspect("equal")
        axs[1].set_xlabel("phi1")
        axs[1].set_ylabel("phi2")
        axs[1].legend(markerscale=4)
        axs[1].set_title("order-1 homopodes on the fiber torus")
        files["heart.png"] = _png(fig)
    return files


def task_realize_jet(cfg, H):
    p, tol = cfg["params"], cfg["tolerances"]
    center = certify_level_point(H, np.asarray(p["center"], float), tol["level_tol"],
                                 tol["submersion_tol"], tol["capture_radius"])
    chart = build_radial_chart(H, center.z, p["P"], p["chart_box"])
    rng = np.random.default_rng(cfg["seed"])
    k = int(p["k"])
    targets = []
    w0 = chart.center
    for t in p["targets"]:
        c = np.atleast_2d(np.asarray(t, float))
        if c.ndim != 2 or c.shape[1] != chart.dim - 1:
            raise ConfigError(f"each target lists derivative rows y', y'', ... of length {chart.dim - 1}")
        targets.append(CurveJet(0, float(w0[0]), np.delete(w0, 0).copy(), c, c.shape[0], 1))
    while len(targets) < int(p["count"]):
        targets.append(random_target_jet(chart, k, rng, float(p["scale"])))
    cases, rows = [], []
    for i, t in enumerate(targets):
        real = realize_jet_hamiltonian(chart, t, h_min=tol["h_min"])
        err = real.roundtrip_error()
        case = {"index": i, "target": t.to_record(), "h": str(real.hamiltonian),
                "validity_box": real.box, "box_shrunk": real.shrunk, "roundtrip_error": err,
                "autonomy_residual": autonomy_residual(real), **real.diagnostics}
        cases.append(case)
        rows.append([i, t.k, float(np.max(err)), case["autonomy_residual"], case["h_base"]])
    out = {"config": cfg, "chart": chart.describe(), "cases": cases,
           "max_roundtrip_error": max((float(np.max(c["roundtrip_error"])) for c in cases), default=0.0)}
    if p["submersivity"]:
        out["submersivity"] = jet_map_submersivity_check(chart, 1.0, k, seed=cfg["seed"])
    files = {"realize.json": _json(out),
             "realize.csv": _csv(["case", "k", "max_roundtrip_error", "autonomy_residual", "h_base"], rows)}
    if cfg["output"]["figures"]:
        plt = _figure()
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.semilogy([r[0] for r in rows], [max(r[2], 1e-18) for r in rows], "o")
        ax.set_xlabel("case")
        ax.set_ylabel("max roundtrip jet error")
        files["realize.png"] = _png(fig)
    return files


def task_resolve(cfg, H):
    p, tol = cfg["params"], cfg["tolerances"]
    orbits = [integrate(H, np.asarray(o["x0"], float), o["window"], drift_tol=tol["drift_tol"])
              for o in p["orbits"]]
    pert, rep = resolve_intersection(H, orbits, np.asarray(p["q_star"], float), int(p["target"]),
                                     int(p["angle_samples"]), tol["clearance_min"],
                                     (p["eps"] or None), (p["r0"] or None))
    rep = dict(rep)
    rep.pop("runtime", None)
    rep["config"] = {**rep.get("config", {}), "scenario": cfg}
    files = {"resolve.json": _json(rep)}
    if cfg["output"]["figures"]:
        plt = _figure()
        fig, ax = plt.subplots(figsize=(5, 5))
        q_star = np.asarray(p["q_star"], float)
        for i, o in enumerate(orbits):
            ax.plot(o.t, np.linalg.norm(o.z[:, :H.n] - q_star, axis=1), lw=1, label=f"orbit {i}")
        if pert.orbits:
            new = pert.orbits[int(p["target"])]
            ax.plot(new.t, np.linalg.norm(new.z[:, :H.n] - q_star, axis=1), "k--", lw=1,
                    label="displaced")
        ax.set_xlabel("t")
        ax.set_ylabel("|q - q*|")
        ax.legend()
        files["resolve.png"] = _png(fig)
    return files


TASKS: dict[str, Callable] = {
    "flow": task_flow, "chord": task_chord, "jets": task_jets, "intersections": task_intersections,
    "homopode-scan": task_homopode_scan, "dimension": task_dimension, "heart": task_heart,
    "realize-jet": task_realize_jet, "resolve": task_resolve,
}
THREADED = {"homopode-scan", "dimension"}


def run_scenario(path, out=None, threads: int = 1, seed=None, stderr=None) -> int:
    """Run one scenario file; returns the exit status."""
    stderr = stderr or sys.stderr
    try:
        cfg, H = prepare(path, seed, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    task = TASKS[cfg["task"]]
    try:
        files = task(cfg, H, threads) if cfg["task"] in THREADED else task(cfg, H)
    except ConfigError as exc:
        print(f"config error: {exc}", file=stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure ({type(exc).__name__}): {exc}", file=stderr)
        return EXIT_NUMERIC
    outdir = Path(cfg["output"]["dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    prefix = cfg["output"]["prefix"]
    for name, content in files.items():
        target = outdir / f"{prefix}_{name}"
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content)
    print(f"{cfg['task']}: wrote {len(files)} files to {outdir} in {time.perf_counter() - t0:.1f} s",
          file=stderr)
    return EXIT_OK


def validate_scenario(path, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        cfg, _ = prepare(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=stderr)
        return EXIT_CONFIG
    stdout.write(_json(cfg))
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="podex", description="Hamiltonian flow and homopode workbench")
    ap.add_argument("--version", action="version", version=f"podex {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario")
    r.add_argument("--out", help="output directory (overrides the scenario and $PODEX_OUT)")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--seed", type=int)
    v = sub.add_parser("validate", help="resolve and print a scenario's configuration")
    v.add_argument("scenario")
    args = ap.parse_args(argv)
    if args.command == "run":
        return run_scenario(args.scenario, args.out, max(1, args.threads), args.seed)
    return validate_scenario(args.scenario)


if __name__ == "__main__":
    sys.exit(main())
