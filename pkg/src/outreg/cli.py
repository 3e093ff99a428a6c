"""Command-line front end with reproducible run manifests.

Exit codes: 0 success, 1 usage or input/output errors, 2 domain infeasibility
(uncertified synthesis, undefined event-triggered bounds, unreachable
targets).  Every failure also writes one structured JSON line to stderr.
Every run emits ``manifest.json`` in the output directory recording the
command, a digest of the inputs, the seed, the tool version, wall-clock time,
and the digests of all output files.

Flags ``--seed --tol --max-iter --jobs --out-dir`` may also be set through
environment variables ``OUTREG_SEED``, ``OUTREG_TOL``, ``OUTREG_MAX_ITER``,
``OUTREG_JOBS``, ``OUTREG_OUT_DIR``; explicit flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, etc_bounds, sim, synthesis
from .errors import (
    AllSolvesFailed,
    DimensionMismatch,
    EquilibriumInfeasible,
    InitializationInfeasible,
    NegativeBound,
    NonFiniteState,
    OutregError,
    StalledBelowZero,
    UsageError,
)
from .model import (
    ControllerGains,
    augment,
    load_model,
    model_to_dict,
    save_model,
    validate_model,
)
from .presets import example1
from .synthesis import (
    SynthesisOptions,
    certify,
    load_certificate,
    refine_for_etc,
    save_certificate,
    synthesize,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DOMAIN = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _diag(kind: str, reason: str):
    print(json.dumps({"error": kind, "reason": reason}), file=sys.stderr)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _digest_obj(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True).encode()).hexdigest()


class _Run:
    """Collects outputs and writes the manifest at the end of a command."""

    def __init__(self, command: str, out_dir: Path, seed: int, digest: str):
        self.command = command
        self.out_dir = out_dir
        self.seed = seed
        self.digest = digest
        self.outputs = []
        self.t0 = time.monotonic()
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.outputs.append(p)
        return p

    def finish(self):
        manifest = {
            "command": self.command,
            "config_digest": self.digest,
            "seed": self.seed,
            "version": __version__,
            "wall_clock_s": time.monotonic() - self.t0,
            "outputs": [
                {"path": p.name, "sha256": _sha256(p), "bytes": p.stat().st_size}
                for p in self.outputs if p.exists()
            ],
        }
        with open(self.out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")


def _load_json(path, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} file not found: {path}")
    try:
        with open(p) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _load_gains(path) -> ControllerGains:
    data = _load_json(path, "gains")
    unknown = set(data) - {"B_c", "C_c", "D_c"}
    if unknown:
        raise UsageError(f"unknown keys in gains file: {sorted(unknown)}")
    try:
        return ControllerGains(B_c=data["B_c"], C_c=data["C_c"], D_c=data["D_c"])
    except KeyError as exc:
        raise UsageError(f"gains file missing key {exc}") from exc


def _save_gains(path, gains: ControllerGains):
    with open(path, "w") as fh:
        json.dump({"B_c": gains.B_c.tolist(), "C_c": gains.C_c.tolist(),
                   "D_c": gains.D_c.tolist()}, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# sim / sweep configuration files
# ---------------------------------------------------------------------------

_SIM_KEYS = {"t_end", "rk4_step", "schedule", "trigger", "x0", "w0",
             "tail_fraction", "realization"}
_REAL_KEYS = {"mode", "seed", "nonlinearity", "k_b"}


def _parse_schedule(data):
    if data is None:
        return None
    kind = data.get("kind")
    if kind == "periodic":
        return ("periodic", float(data["h"]))
    if kind == "jittered":
        return ("jittered", float(data["h_min"]), float(data["h_max"]),
                int(data.get("seed", 0)))
    raise UsageError(f"unknown schedule kind {kind!r}")


def _parse_sim_config(data: dict, default_seed: int):
    unknown = set(data) - _SIM_KEYS
    if unknown:
        raise UsageError(f"unknown keys in sim config: {sorted(unknown)}")
    trigger = data.get("trigger")
    if trigger is not None:
        trigger = (float(trigger["q0"]), float(trigger["q1"]))
    cfg = sim.SimConfig(
        t_end=float(data["t_end"]),
        rk4_step=float(data["rk4_step"]),
        sample_schedule=_parse_schedule(data.get("schedule")),
        trigger=trigger,
        x0=data.get("x0"),
        w0=data.get("w0"),
        tail_fraction=float(data.get("tail_fraction", 0.2)),
    )
    real = data.get("realization", {"mode": "custom"})
    unknown = set(real) - _REAL_KEYS
    if unknown:
        raise UsageError(f"unknown keys in realization config: {sorted(unknown)}")
    real = dict(real)
    real.setdefault("seed", default_seed)
    return cfg, real


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    model, task = load_model(args.model)
    rep = validate_model(model, task)
    for line in rep.lines():
        print(line)
    if not rep.ok:
        _diag("validation", "; ".join(n for n, ok, _ in rep.checks if not ok))
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_synthesize(args) -> int:
    model, task = load_model(args.model)
    run = _Run("synthesize", Path(args.out_dir), args.seed,
               _digest_obj(model_to_dict(model, task)))
    opts = SynthesisOptions(eps_alg=args.eps_alg, max_outer=args.max_outer,
                            tol=args.tol)
    gains, cert, trace = synthesize(model, opts)
    _save_gains(run.path("gains.json"), gains)
    save_certificate(run.path("certificate.json"), cert, model, task)
    with open(run.path("trace.json"), "w") as fh:
        json.dump(trace, fh, indent=2)
        fh.write("\n")
    run.finish()
    print(f"objective alpha/zeta = {cert.objective:.6g} "
          f"(alpha={cert.alpha:.6g}, zeta={cert.zeta:.6g}), eps_c={cert.eps_c:.6g}")
    return EXIT_OK


def cmd_certify(args) -> int:
    model, task = load_model(args.model)
    gains = _load_gains(args.gains)
    zeta_grid = [float(z) for z in args.zeta_grid.split(",")]
    run = _Run("certify", Path(args.out_dir), args.seed,
               _digest_obj([model_to_dict(model, task), args.zeta_grid]))
    cert = certify(model, gains, zeta_grid, tol=args.tol, max_iter=args.max_iter)
    save_certificate(run.path("certificate.json"), cert, model, task)
    run.finish()
    print(f"objective alpha/zeta = {cert.objective:.6g}, eps_c = {cert.eps_c:.6g}")
    if not cert.certified:
        _diag("certification", "alpha <= 0: no robust certificate for these gains")
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_etc_bounds(args) -> int:
    cert, model, task = load_certificate(args.certificate)
    aug = augment(model, cert.gains)
    run = _Run("etc-bounds", Path(args.out_dir), args.seed,
               _digest_obj([args.q0, args.q1, args.h_bar]))
    ec = etc_bounds.build_etc_certificate(cert, model, aug,
                                          args.q0, args.q1, args.h_bar)
    etc_bounds.save_etc_certificate(run.path("etc_certificate.json"), ec)
    run.finish()
    if ec.h_max is None:
        _diag("etc-bounds", "h_max undefined")
        return EXIT_DOMAIN
    print(f"h_max = {ec.h_max:.6g}, q1_bound = {ec.q1_bound:.6g}")
    if not ec.defined:
        _diag("etc-bounds", "eps_d undefined (h_bar exceeds h_max)")
        return EXIT_DOMAIN
    print(f"eps_d = {ec.eps_d:.6g} (f1={ec.f1:.6g}, f2={ec.f2:.6g})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cert, model, task = load_certificate(args.certificate)
    cfg, real_spec = _parse_sim_config(_load_json(args.sim_config, "sim config"),
                                       args.seed)
    realization = sim.sample_realization(
        model, real_spec.get("mode", "custom"), seed=int(real_spec["seed"]),
        nonlinearity=real_spec.get("nonlinearity", "none"),
        k_b=real_spec.get("k_b"))
    run = _Run("simulate", Path(args.out_dir), args.seed,
               _sha256(Path(args.sim_config)))
    if cfg.sample_schedule is None:
        traj = sim.simulate_continuous(model, cert.gains, task, realization, cfg)
    else:
        traj = sim.simulate_aetc(model, cert.gains, task, realization, cfg)
    sim.trajectory_to_csv(run.path("trajectory.csv"), traj)
    run.finish()
    print(f"tail error = {traj.regulation_error_tail:.6g}, "
          f"event rate = {traj.event_rate:.6g}")
    return EXIT_OK


_SWEEP_KEYS = {"kind", "grid", "reps", "t_end", "rk4_step", "h_bar",
               "tail_fraction"}


def cmd_sweep(args) -> int:
    cert, model, task = load_certificate(args.certificate)
    spec = _load_json(args.sweep_config, "sweep config")
    unknown = set(spec) - _SWEEP_KEYS
    if unknown:
        raise UsageError(f"unknown keys in sweep config: {sorted(unknown)}")
    kind = spec.get("kind")
    grid = [float(g) for g in spec["grid"]]
    reps = int(spec.get("reps", 10))
    run = _Run("sweep", Path(args.out_dir), args.seed, _sha256(Path(args.sweep_config)))
    if kind == "kb":
        cfg = sim.SimConfig(t_end=float(spec["t_end"]),
                            rk4_step=float(spec["rk4_step"]),
                            tail_fraction=float(spec.get("tail_fraction", 0.2)))
        rows = sim.sweep_kb(model, cert.gains, task, cert, grid, reps, cfg,
                            seed=args.seed, jobs=args.jobs)
        cols = ["k_b", "worst_err", "mean_err", "bound", "event_rate_mean",
                "reps", "failed"]
    elif kind == "threshold":
        h_bar = float(spec["h_bar"])
        cfg = sim.SimConfig(t_end=float(spec["t_end"]),
                            rk4_step=float(spec["rk4_step"]),
                            sample_schedule=("periodic", h_bar),
                            tail_fraction=float(spec.get("tail_fraction", 0.2)))
        consts = etc_bounds.etc_constants(augment(model, cert.gains), model,
                                          cert.P, cert.gains)
        rows = sim.sweep_threshold(model, cert.gains, task, cert, consts, grid,
                                   reps, cfg, seed=args.seed, jobs=args.jobs)
        cols = ["xi", "q0", "q1", "h_bar", "h_max", "eps_d", "f1", "f2",
                "worst_err", "mean_err", "bound", "event_rate_mean", "reps",
                "failed"]
    else:
        raise UsageError(f"unknown sweep kind {kind!r}")
    sim.sweep_to_csv(run.path("sweep.csv"), rows, cols)
    run.finish()
    print(f"wrote {len(rows)} rows")
    return EXIT_OK


def _example1_fig_settings(cert, model, gains):
    """Deterministic horizons/steps for the bundled experiments, derived from
    the certified nominal closed loop."""
    aug = augment(model, gains)
    Acl = aug.Abar + aug.Bbar @ aug.F @ aug.Cbar
    decay = -float(np.max(np.linalg.eigvals(Acl).real))
    decay = max(decay, 1e-2)
    t_end = min(60.0 / decay, 400.0)
    return t_end, 2e-3


def cmd_reproduce_example1(args) -> int:
    model, task = example1()
    run = _Run("reproduce-example1", Path(args.out_dir), args.seed,
               _digest_obj(model_to_dict(model, task)))
    save_model(run.path("model.json"), model, task)

    opts = SynthesisOptions(eps_alg=args.eps_alg, max_outer=args.max_outer,
                            tol=args.tol)
    gains, synth_cert, trace = synthesize(model, opts)
    _save_gains(run.path("gains.json"), gains)
    with open(run.path("trace.json"), "w") as fh:
        json.dump(trace, fh, indent=2)
        fh.write("\n")

    zeta_grid = sorted({10.0 ** e for e in range(-3, 4)} | {synth_cert.zeta})
    cert = certify(model, gains, zeta_grid, tol=args.tol)
    if cert.objective < synth_cert.objective:
        cert = synth_cert
    save_certificate(run.path("certificate.json"), cert, model, task)
    print(f"synthesis objective alpha/zeta = {synth_cert.objective:.6g}; "
          f"re-certified = {cert.objective:.6g}")

    refined = refine_for_etc(model, gains)
    save_certificate(run.path("certificate_etc.json"), refined, model, task)
    aug = augment(model, refined.gains)
    consts = etc_bounds.etc_constants(aug, model, refined.P, refined.gains)
    q1_bound = etc_bounds.q1_perfect_tracking_bound(consts, refined.alpha)
    q1_ref = q1_bound / 4.0 if np.isfinite(q1_bound) and q1_bound > 0 else 0.0
    hm = etc_bounds.h_max(consts, refined.alpha, refined.zeta, q1_ref)
    h_ref = hm if hm is not None else 0.0
    ec = etc_bounds.build_etc_certificate(refined, model, aug, q1_ref, q1_ref,
                                          h_ref)
    etc_bounds.save_etc_certificate(run.path("etc_certificate.json"), ec)
    print(f"computed h_max = {ec.h_max!r} at q1 = {q1_ref:.3e} "
          f"(q1_bound = {q1_bound:.3e})")

    t_end, step = _example1_fig_settings(cert, model, gains)
    kb_grid = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]
    cfg1 = sim.SimConfig(t_end=t_end, rk4_step=step)
    rows1 = sim.sweep_kb(model, gains, task, cert, kb_grid, args.reps, cfg1,
                         seed=args.seed, jobs=args.jobs)
    sim.sweep_to_csv(run.path("fig1.csv"), rows1,
                     ["k_b", "worst_err", "mean_err", "bound",
                      "event_rate_mean", "reps", "failed"])

    h_bar = 0.01
    xi_grid = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1]
    cfg2 = sim.SimConfig(t_end=t_end, rk4_step=min(step, h_bar / 4.0),
                         sample_schedule=("periodic", h_bar))
    rows2 = sim.sweep_threshold(model, gains, task, cert, consts, xi_grid,
                                args.reps, cfg2, seed=args.seed, jobs=args.jobs)
    sim.sweep_to_csv(run.path("fig2.csv"), rows2,
                     ["xi", "q0", "q1", "h_bar", "h_max", "eps_d", "f1", "f2",
                      "worst_err", "mean_err", "bound", "event_rate_mean",
                      "reps", "failed"])
    run.finish()
    if cert.objective <= 0:
        _diag("reproduce", "synthesis objective not positive")
        return EXIT_DOMAIN
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _env(name: str, cast, default):
    raw = os.environ.get(f"OUTREG_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise UsageError(f"bad OUTREG_{name}={raw!r}: {exc}") from exc


def build_parser() -> _Parser:
    p = _Parser(prog="outreg", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seed", type=int, default=_env("SEED", int, 0))
    p.add_argument("--tol", type=float, default=_env("TOL", float, 1e-8))
    p.add_argument("--max-iter", type=int, default=_env("MAX_ITER", int, 200))
    p.add_argument("--jobs", type=int, default=_env("JOBS", int, 1))
    p.add_argument("--out-dir", default=_env("OUT_DIR", str, "."))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a model/task file")
    s.add_argument("model")
    s.set_defaults(fn=cmd_validate)

    s = sub.add_parser("synthesize", help="co-design gains and certificate")
    s.add_argument("model")
    s.add_argument("--eps-alg", type=float, default=1e-3)
    s.add_argument("--max-outer", type=int, default=50)
    s.set_defaults(fn=cmd_synthesize)

    s = sub.add_parser("certify", help="certify fixed gains")
    s.add_argument("model")
    s.add_argument("gains")
    s.add_argument("--zeta-grid",
                   default="0.001,0.01,0.1,1,10,100,1000")
    s.set_defaults(fn=cmd_certify)

    s = sub.add_parser("etc-bounds", help="event-triggered bounds for a certificate")
    s.add_argument("certificate")
    s.add_argument("--q0", type=float, required=True)
    s.add_argument("--q1", type=float, required=True)
    s.add_argument("--h-bar", type=float, required=True)
    s.set_defaults(fn=cmd_etc_bounds)

    s = sub.add_parser("simulate", help="simulate a certified loop")
    s.add_argument("certificate")
    s.add_argument("--sim-config", required=True)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("sweep", help="parameter sweep experiment")
    s.add_argument("certificate")
    s.add_argument("--sweep-config", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("reproduce-example1",
                       help="full pipeline on the bundled benchmark")
    s.add_argument("--eps-alg", type=float, default=1e-3)
    s.add_argument("--max-outer", type=int, default=50)
    s.add_argument("--reps", type=int, default=20)
    s.set_defaults(fn=cmd_reproduce_example1)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        _diag("usage", str(exc))
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, json.JSONDecodeError) as exc:
        _diag("io", str(exc))
        return EXIT_USAGE
    except (DimensionMismatch, NegativeBound) as exc:
        _diag("input", str(exc))
        return EXIT_USAGE
    except (StalledBelowZero, InitializationInfeasible, EquilibriumInfeasible,
            AllSolvesFailed, NonFiniteState) as exc:
        _diag("domain", str(exc))
        return EXIT_DOMAIN
    except OutregError as exc:
        _diag("error", str(exc))
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
