"""Scenario files and the replica-parallel refinement study behind the CLI."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import tomli

from . import analysis
from .ensemble import range_projector
from .model import ForwardModel, InverseProblem, extend_tikhonov, sym_sqrt
from .noise import MAX_LEVEL, build_lattice
from .schemes import (CSV_SCHEMA_VERSION, EM, TAMED, TEKI, SchemeConfig, interpolate_all,
                      reference_path, simulate)

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 1},
           "minItems": 1}
_vector = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_scalar_or_matrix = {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, _matrix]}

SCENARIO_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["problem", "ensemble", "run"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "problem": {
            "type": "object",
            "required": ["kind", "y"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["linear", "lipschitz_tanh", "cubic"]},
                "A": _matrix,
                "mix": _matrix,
                "p": {"type": "integer", "minimum": 1},
                "scale": {"type": "number", "exclusiveMinimum": 0},
                "gamma": _scalar_or_matrix,
                "y": _vector,
            },
        },
        "ensemble": {
            "type": "object",
            "required": ["J"],
            "additionalProperties": False,
            "properties": {
                "J": {"type": "integer", "minimum": 2},
                "particles": _matrix,
                "mean": _vector,
                "cov": _scalar_or_matrix,
                "project_to_range": {"type": "boolean"},
            },
        },
        "run": {
            "type": "object",
            "required": ["levels", "reference_level", "replicas", "seed"],
            "additionalProperties": False,
            "properties": {
                "T": {"type": "number", "exclusiveMinimum": 0},
                "levels": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "reference_level": {"type": "integer", "minimum": 0, "maximum": MAX_LEVEL},
                "replicas": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "variant": {"enum": [TAMED, EM, TEKI]},
                "gamma_exponent": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                "theta": {"type": "number", "exclusiveMinimum": 0, "maximum": 2},
                "lambda": {"type": "number", "exclusiveMinimum": 0},
                "C0": _matrix,
                "explosion_threshold": {"type": "number", "exclusiveMinimum": 0},
                "chunk": {"type": "integer", "minimum": 1},
                "histogram_bins": {"type": "integer", "minimum": 1},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "h": {"type": "number", "exclusiveMinimum": 0},
                "mc_draws": {"type": "integer", "minimum": 2},
                "steps_level": {"type": "integer", "minimum": 0, "maximum": 16},
                "replicas": {"type": "integer", "minimum": 2},
                "y_tilde": _vector,
            },
        },
    },
}

RUN_DEFAULTS = {"T": 1.0, "variant": TAMED, "gamma_exponent": analysis.DEFAULT_GAMMA, "theta": 2.0,
                "explosion_threshold": 1e8, "chunk": 32, "histogram_bins": 20}
VERIFY_DEFAULTS = {"h": 0.1, "mc_draws": 100_000, "steps_level": 8, "replicas": 200}


class ConfigError(ValueError):
    """Invalid scenario; the message starts with the offending field path."""


def _err(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def load_scenario(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"<file>: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"<file>: {exc}") from exc
    return validate_scenario(raw)


def validate_scenario(raw: dict) -> dict:
    """Schema validation plus cross-field checks; returns a copy with defaults filled in."""
    v = jsonschema.Draft7Validator(SCENARIO_SCHEMA)
    errors = sorted(v.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(x) for x in e.absolute_path) or "<root>"
        _err(where, e.message)
    sc = copy.deepcopy(raw)
    sc["run"] = {**RUN_DEFAULTS, **sc["run"]}
    sc["verify"] = {**VERIFY_DEFAULTS, **sc.get("verify", {})}
    run = sc["run"]
    lv = run["levels"]
    if any(b <= a for a, b in zip(lv, lv[1:])):
        _err("run/levels", "levels must be strictly increasing")
    if run["reference_level"] < max(lv):
        _err("run/reference_level", "reference level must be at least the finest run level")
    if run["variant"] == TEKI and "lambda" not in run:
        _err("run/lambda", "TEKI runs need lambda")
    try:
        prob = build_problem(sc)
    except ValueError as exc:
        _err("problem", str(exc))
    ens = sc["ensemble"]
    if "particles" in ens:
        P = np.asarray(ens["particles"], dtype=float)
        if P.ndim != 2 or P.shape != (ens["J"], prob.p):
            _err("ensemble/particles", f"expected a {ens['J']} x {prob.p} array")
    elif "mean" in ens:
        if len(ens["mean"]) != prob.p:
            _err("ensemble/mean", f"expected length {prob.p}")
        cov = ens.get("cov", 1.0)
        if not np.isscalar(cov) and np.asarray(cov).shape != (prob.p, prob.p):
            _err("ensemble/cov", f"expected a {prob.p} x {prob.p} matrix")
    else:
        _err("ensemble", "give either particles or mean (and optionally cov)")
    if ens.get("project_to_range") and prob.whitened_operator is None:
        _err("ensemble/project_to_range", "only defined for linear problems")
    if run["variant"] == TEKI:
        if prob.whitened_operator is None:
            _err("run/variant", "TEKI needs a linear problem")
        if "C0" in run and np.asarray(run["C0"]).shape != (prob.p, prob.p):
            _err("run/C0", f"expected a {prob.p} x {prob.p} matrix")
    if "y_tilde" in sc["verify"] and len(sc["verify"]["y_tilde"]) != prob.K:
        _err("verify/y_tilde", f"expected length {prob.K}")
    return sc


def build_problem(sc: dict) -> InverseProblem:
    pr = sc["problem"]
    kind = pr["kind"]
    if kind == "linear":
        if "A" not in pr:
            raise ValueError("linear problems need A")
        model = ForwardModel.linear(pr["A"])
    elif kind == "lipschitz_tanh":
        if "mix" not in pr:
            raise ValueError("lipschitz_tanh needs mix")
        model = ForwardModel.lipschitz_tanh(pr["mix"])
    else:
        if "p" not in pr:
            raise ValueError("cubic needs p")
        model = ForwardModel.cubic(pr["p"], pr.get("scale", 1.0))
    return InverseProblem(model, pr.get("gamma", 1.0), pr["y"])


def scheme_config(sc: dict, level: int) -> SchemeConfig:
    run = sc["run"]
    C0 = None if "C0" not in run else np.asarray(run["C0"], dtype=float)
    return SchemeConfig(run["variant"], level, float(run["T"]), float(run["explosion_threshold"]),
                        run.get("lambda"), C0)


def replica_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([seed, r]).generate_state(1, np.uint64)[0])


def initial_ensembles(sc: dict, replicas) -> np.ndarray:
    """Initial particles for the given replica indices, shape (len(replicas), J, p)."""
    ens = sc["ensemble"]
    prob = build_problem(sc)
    J, p = ens["J"], prob.p
    out = np.empty((len(replicas), J, p))
    if "particles" in ens:
        out[:] = np.asarray(ens["particles"], dtype=float)
    else:
        mean = np.asarray(ens["mean"], dtype=float)
        cov = ens.get("cov", 1.0)
        root = np.sqrt(cov) * np.eye(p) if np.isscalar(cov) else sym_sqrt(np.asarray(cov, dtype=float))
        seed = sc["run"]["seed"]
        for i, r in enumerate(replicas):
            g = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, r, 1])))
            out[i] = mean + g.standard_normal((J, p)) @ root
    if ens.get("project_to_range"):
        out = out @ range_projector(prob.whitened_operator)
    return out


def noise_dim(sc: dict) -> int:
    prob = build_problem(sc)
    return prob.K + prob.p if sc["run"]["variant"] == TEKI else prob.K


@dataclass
class LevelChunk:
    sup_errors: np.ndarray
    exploded: np.ndarray
    exploded_at: np.ndarray
    tau: np.ndarray
    triggers: list
    m_s1: Optional[np.ndarray]
    m_s2: Optional[np.ndarray]
    m_n: int
    u2_sum: np.ndarray
    u2_n: np.ndarray


def run_chunk(sc: dict, start: int, stop: int) -> dict:
    """Refinement study for replicas ``start..stop-1``; a pure function of its arguments."""
    run = sc["run"]
    prob = build_problem(sc)
    reps = list(range(start, stop))
    L = run["reference_level"]
    lattice = build_lattice([replica_seed(run["seed"], r) for r in reps], float(run["T"]), L,
                            sc["ensemble"]["J"], noise_dim(sc))
    U0 = initial_ensembles(sc, reps)
    ref = reference_path(prob, U0, lattice, scheme_config(sc, L))
    X = ref.states
    x_norm = analysis.stacked_norms(X)
    times = np.arange(X.shape[0]) * lattice.h_min
    out = {}
    for lvl in run["levels"]:
        traj = ref if lvl == L and run["variant"] != EM else simulate(scheme_config(sc, lvl), prob, U0, lattice)
        Y = interpolate_all(traj, lattice)
        e = analysis.stacked_norms(X - Y)
        exploded = traj.exploded | ref.exploded
        sup = np.where(exploded | ~np.all(np.isfinite(e), axis=0), np.inf, np.nanmax(e, axis=0))
        taus, trig = [], []
        for i in range(len(reps)):
            t, g = analysis.stopping_time(x_norm[:, i], e[:, i],
                                          analysis.default_radius(x_norm[0, i]), times)
            taus.append(t)
            trig.append(g)
        acc = analysis.MomentAccumulator(run["theta"])
        acc.add(e, exploded)
        u2 = np.sum(traj.states ** 2, axis=(-2, -1)) / traj.states.shape[-2]   # (n+1, R)
        ok = np.isfinite(u2)
        out[lvl] = LevelChunk(sup, exploded, np.asarray(traj.exploded_at, dtype=float),
                              np.asarray(taus), trig, acc.s1, acc.s2, acc.n,
                              np.where(ok, u2, 0.0).sum(axis=1), ok.sum(axis=1))
    return out


def _chunks(n: int, size: int):
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def run_study(sc: dict, jobs: int = 1, progress=None) -> analysis.ConvergenceReport:
    """All replicas, chunked; reduction follows chunk order so ``jobs`` never changes results."""
    run = sc["run"]
    chunks = _chunks(run["replicas"], run["chunk"])
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_chunk, [sc] * len(chunks), *zip(*chunks)))
    else:
        results = []
        for a, b in chunks:
            results.append(run_chunk(sc, a, b))
            if progress:
                progress(b, run["replicas"])
    return reduce_chunks(sc, results)


def reduce_chunks(sc: dict, results: list) -> analysis.ConvergenceReport:
    run = sc["run"]
    per_level, hist, census = [], {}, {}
    for lvl in run["levels"]:
        parts = [res[lvl] for res in results]
        sup = np.concatenate([c.sup_errors for c in parts])
        exploded = np.concatenate([c.exploded for c in parts])
        acc = analysis.MomentAccumulator(run["theta"])
        for c in parts:
            if c.m_n:
                acc.s1 = c.m_s1 if acc.s1 is None else acc.s1 + c.m_s1
                acc.s2 = c.m_s2 if acc.s2 is None else acc.s2 + c.m_s2
                acc.n += c.m_n
        acc.n_exploded = int(exploded.sum())
        u2_sum = sum(c.u2_sum for c in parts)
        u2_n = sum(c.u2_n for c in parts)
        with np.errstate(invalid="ignore", divide="ignore"):
            u2_mean = np.where(u2_n > 0, u2_sum / np.maximum(u2_n, 1), np.nan)
        h = run["T"] / 2 ** lvl
        per_level.append(analysis.summarize_level(lvl, h, sup, exploded, acc.result(),
                                                  run["gamma_exponent"], float(np.nanmax(u2_mean))))
        hist[lvl] = sup
        at = np.concatenate([c.exploded_at for c in parts])
        triggers = [t for c in parts for t in c.triggers]
        census[str(lvl)] = {
            "exploded": int(exploded.sum()),
            "earliest": float(np.nanmin(at)) if np.isfinite(at).any() else None,
            "tau_triggers": {k: triggers.count(k) for k in (analysis.HORIZON, analysis.RADIUS,
                                                            analysis.ERROR)},
        }
    meta = {"name": sc.get("name", ""), "variant": run["variant"], "T": run["T"],
            "reference_level": run["reference_level"], "seed": run["seed"], "census": census}
    report = analysis.ConvergenceReport(list(run["levels"]), per_level, run["replicas"], run["theta"],
                                        run["gamma_exponent"], meta=meta, histograms=hist)
    return report


def payload_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_report(report: analysis.ConvergenceReport, out_dir, bins: int = 20) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.payload()
    doc = {"payload": payload, "sha256": payload_digest(payload),
           "generated_at": datetime.now(timezone.utc).isoformat()}
    path = out / "report.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    report.write_csv(out / "report.csv")
    for lvl, sup in report.histograms.items():
        write_histogram(out / f"hist_level{lvl:02d}.csv", lvl, sup, bins)
    return path


def write_histogram(path, level: int, sup: np.ndarray, bins: int) -> None:
    finite = sup[np.isfinite(sup)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", "level", "bin_low", "bin_high", "count"])
        if finite.size:
            counts, edges = np.histogram(finite, bins=bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([CSV_SCHEMA_VERSION, level, repr(float(lo)), repr(float(hi)), int(c)])
        w.writerow([CSV_SCHEMA_VERSION, level, "inf", "inf", int(np.sum(~np.isfinite(sup)))])


def read_report(path) -> analysis.ConvergenceReport:
    doc = json.loads(Path(path).read_text())
    payload = doc.get("payload", doc)
    return analysis.ConvergenceReport.from_payload(payload)


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)


def verify_scenario(sc: dict) -> list:
    """The full identity suite on a linear scenario; returns IdentityReports.

    Precondition failures of individual checks are reported as failed
    entries, except a non-orthogonal ``verify.y_tilde`` which is a
    configuration error.
    """
    from . import properties as P
    from .model import decompose_observation

    prob = build_problem(sc)
    B = prob.whitened_operator
    if B is None:
        raise ConfigError("problem/kind: verify needs a linear problem")
    vf, run = sc["verify"], sc["run"]
    h = float(vf["h"])
    y_hat, y_tilde, u_hat = decompose_observation(B, prob.whitened_observation)
    U0 = initial_ensembles(sc, [0])[0]
    reports = []

    if "y_tilde" in vf:
        try:
            reports.append(P.check_orthogonality(U0, B, h, vf["y_tilde"]))
        except P.PreconditionError as exc:
            raise ConfigError(f"verify/y_tilde: {exc}") from exc
    else:
        reports.append(P.check_orthogonality(U0, B, h, y_tilde))
    reports.append(P.check_spread_decrement(U0, B, h, vf["mc_draws"], seed=run["seed"]))
    reports.append(P.check_residual_decrement(U0, B, h, u_hat, vf["mc_draws"], seed=run["seed"] + 1))
    reports.append(P.check_quadform_nonneg(U0 - U0.mean(axis=0), B.T @ B))

    # path checks on a batch of stochastic tamed runs
    R, lvl = vf["replicas"], vf["steps_level"]
    T = float(run["T"])
    reps = list(range(R))
    lattice = build_lattice([replica_seed(run["seed"], r) for r in reps], T, lvl,
                            sc["ensemble"]["J"], prob.K)
    traj = simulate(SchemeConfig(TAMED, lvl, T), prob, initial_ensembles(sc, reps), lattice)
    worst = max(P.taming_residual(traj.states[n], B, traj.h) for n in range(traj.states.shape[0] - 1))
    reports.append(P.IdentityReport.make("taming_identity", 0.0, worst, 1e-12, traj.states.shape[0] - 1))
    reports.append(P.check_subspace(traj))
    try:
        reports.append(P.check_kernel_invariance(traj, B))
    except P.PreconditionError as exc:
        reports.append(P.IdentityReport.make("kernel_invariance", 0.0, float("nan"), 1e-9, 0,
                                             detail=f"precondition: {exc}", passed=False))
    reports.extend(P.check_sum_bounds(traj, B, u_hat))
    reports.append(P.check_monotone_trend(P.spread_series(traj), "spread_trend"))
    reports.append(P.check_monotone_trend(P.residual_series(traj, u_hat), "residual_trend"))
    return reports


FIGURE1_A = np.diag([100.0, 1.0])
FIGURE1_MEAN = np.array([100.0, 100.0])
FIGURE1_COV = np.array([[25.0, -24.0], [-24.0, 25.0]])


def figure1_problem() -> InverseProblem:
    return InverseProblem(ForwardModel.linear(FIGURE1_A), np.eye(2), np.zeros(2))


def matched_ensemble(mean, cov, J: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian draw shifted and linearly mapped to hit ``mean`` and the 1/J covariance ``cov`` exactly."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    p = mean.size
    if J <= p:
        raise ValueError(f"need J > p = {p} particles to match a full-rank covariance")
    X = rng.standard_normal((J, p))
    X -= X.mean(axis=0)
    S = X.T @ X / J
    return mean + X @ sym_sqrt(S, inverse=True) @ sym_sqrt(cov)


def figure1(mode: str = "deterministic", J: int = 5, level: int = 14, seed: int = 0):
    """Mean path of the scheme on the diag(100, 1) example; returns (times, means, summary)."""
    from .noise import NoiseLattice

    if mode not in ("deterministic", "stochastic"):
        raise ValueError("mode must be deterministic or stochastic")
    prob = figure1_problem()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xF1])))
    U0 = matched_ensemble(FIGURE1_MEAN, FIGURE1_COV, J, rng)
    if mode == "deterministic":
        inc = np.zeros((2 ** level, J, 2))
        inc.setflags(write=False)
        lattice = NoiseLattice(seed, 1.0, level, J, 2, inc)
    else:
        lattice = build_lattice(seed, 1.0, level, J, 2)
    traj = simulate(SchemeConfig(TAMED, level, 1.0), prob, U0, lattice)
    means = traj.states.mean(axis=-2)
    norms = np.linalg.norm(means, axis=-1)
    k = int(np.argmax(norms))
    C0 = (U0 - U0.mean(0)).T @ (U0 - U0.mean(0)) / J
    w, V = np.linalg.eigh(C0)
    summary = {
        "mode": mode, "J": J, "level": level, "seed": seed,
        "norm_initial": float(norms[0]),
        "norm_max": float(norms[k]),
        "t_max": float(traj.times[k]),
        "norm_final": float(norms[-1]),
        "initial_cov_eigenvalues": [float(x) for x in w],
        "initial_cov_eigenvectors": [[float(x) for x in V[:, i]] for i in range(2)],
        "exploded": traj.exploded,
    }
    return traj.times, means, summary


def write_figure1(out_dir, times, means, summary) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "figure1_mean.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", "t", "mean_0", "mean_1", "norm"])
        for t, m in zip(times, means):
            w.writerow([CSV_SCHEMA_VERSION, repr(float(t)), repr(float(m[0])), repr(float(m[1])),
                        repr(float(np.linalg.norm(m)))])
    (out / "figure1_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
