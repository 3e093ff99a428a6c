"""Closed-loop simulation of the uncertain plant and sweep experiments.

Two operating modes share one fixed-step classical Runge-Kutta core:

* continuous: the PI controller state is integrated together with the plant;
* event-triggered: measurements arrive at prescribed instants, the controller
  state advances by its exact affine hold between samples, and the actuation
  value is recomputed only when the quadratic trigger fires.

Integration steps never straddle a sample instant (inputs and controller
slopes are discontinuous exactly there).  Simulations are deterministic given
the configuration and seed; sweeps distribute (grid point x repetition) tasks
over processes with per-task seeds derived from the master seed, so results
do not depend on the worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionMismatch, EquilibriumInfeasible, NonFiniteState
from .etc_bounds import (
    EtcConstants,
    TriggerMatrix,
    eps_d,
    f1 as _f1,
    f2 as _f2,
    h_max as _h_max,
    qtilde,
)
from .model import (
    ControllerGains,
    PlantModel,
    RegulationTask,
    UncertaintyRealization,
    controller_equilibrium,
    realized_equilibrium,
)
from .synthesis import SynthesisCertificate, eps_c

DIVERGENCE_GUARD = 1e12


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Simulation setup.

    ``sample_schedule`` is ``None`` for the continuous loop, ``("periodic",
    h)``, or ``("jittered", h_min, h_max, seed)``.  ``trigger`` is ``None``
    (update at every sample), a ``TriggerMatrix``, or a ``(q0, q1)`` pair for
    the mixed threshold.  ``tail_fraction`` is the terminal fraction of the
    horizon over which the asymptotic regulation error is estimated.
    """

    t_end: float
    rk4_step: float
    sample_schedule: Optional[tuple] = None
    trigger: Union[None, TriggerMatrix, Tuple[float, float]] = None
    x0: Optional[np.ndarray] = None
    w0: Optional[np.ndarray] = None
    tail_fraction: float = 0.2
    record_stride: Optional[int] = None   # None: auto, ~5e4 recorded points

    def __post_init__(self):
        if not (0.0 < self.tail_fraction < 1.0):
            raise ValueError("tail_fraction must lie in (0, 1)")
        if self.t_end <= 0 or self.rk4_step <= 0:
            raise ValueError("t_end and rk4_step must be positive")
        if self.sample_schedule is not None:
            kind = self.sample_schedule[0]
            if kind == "periodic":
                h = float(self.sample_schedule[1])
                hmin = h
            elif kind == "jittered":
                hmin = float(self.sample_schedule[1])
            else:
                raise ValueError(f"unknown schedule kind {kind!r}")
            if self.rk4_step > hmin / 4.0 + 1e-15:
                raise ValueError(
                    f"rk4_step={self.rk4_step} exceeds min inter-sample/4={hmin / 4.0}")

    def sample_times(self) -> np.ndarray:
        """Sample instants in [0, t_end) for the configured schedule."""
        if self.sample_schedule is None:
            raise ValueError("no sample schedule configured")
        kind = self.sample_schedule[0]
        if kind == "periodic":
            h = float(self.sample_schedule[1])
            n = int(math.ceil(self.t_end / h))
            ts = np.arange(n) * h
            return ts[ts < self.t_end - 1e-12 * self.t_end]
        _, hmin, hmax, seed = self.sample_schedule
        rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
        ts = [0.0]
        while True:
            nxt = ts[-1] + rng.uniform(float(hmin), float(hmax))
            if nxt >= self.t_end:
                break
            ts.append(nxt)
        return np.asarray(ts)


@dataclass
class Trajectory:
    """Recorded closed-loop run.

    ``events`` flags the recorded times at which an actuation update was
    sent; in event-triggered mode the input is constant between flagged
    instants and the controller state is piecewise linear between samples.
    """

    times: np.ndarray
    x: np.ndarray
    w: np.ndarray
    u: np.ndarray
    y: np.ndarray
    events: np.ndarray
    regulation_error_tail: float
    event_rate: float
    n_samples: int = 0
    n_events: int = 0
    nonlinearity_increment_max: float = 0.0
    nonlinearity_bound_violated: bool = False

    def tail_mask(self, tail_fraction: float) -> np.ndarray:
        t_end = self.times[-1]
        return self.times >= (1.0 - tail_fraction) * t_end


def _rk4_span(f, t0: float, x0: np.ndarray, span: float, max_step: float):
    """Integrate dx/dt = f(t, x) over [t0, t0+span] with uniform substeps.

    Yields (t, x) after each substep.  Substep count is chosen so steps never
    exceed ``max_step`` and land exactly on the span end.
    """
    n = max(1, int(math.ceil(span / max_step - 1e-12)))
    dt = span / n
    t, x = t0, x0
    for i in range(n):
        k1 = f(t, x)
        k2 = f(t + dt / 2.0, x + dt / 2.0 * k1)
        k3 = f(t + dt / 2.0, x + dt / 2.0 * k2)
        k4 = f(t + dt, x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + (i + 1) * dt
        yield t, x


class _Recorder:
    def __init__(self, model: PlantModel, realization: UncertaintyRealization):
        self.model = model
        self.realization = realization
        self.times, self.xs, self.ws, self.us, self.ys, self.ev = [], [], [], [], [], []
        self.k_min = None
        self.k_max = None

    def add(self, t, x, w, u, event=False):
        if np.max(np.abs(x)) > DIVERGENCE_GUARD or np.max(np.abs(w)) > DIVERGENCE_GUARD:
            raise NonFiniteState(t, trajectory=self.finish(0.2, 0, 0, partial=True))
        self.times.append(t)
        self.xs.append(np.asarray(x, float).copy())
        self.ws.append(np.asarray(w, float).copy())
        self.us.append(np.asarray(u, float).copy())
        self.ys.append(self.model.C @ x)
        self.ev.append(1.0 if event else 0.0)
        kv = self.realization.k(x)
        self.k_min = kv if self.k_min is None else np.minimum(self.k_min, kv)
        self.k_max = kv if self.k_max is None else np.maximum(self.k_max, kv)

    def finish(self, tail_fraction, n_samples, n_events, y_d=None, partial=False):
        times = np.asarray(self.times)
        y = np.asarray(self.ys)
        traj = Trajectory(
            times=times, x=np.asarray(self.xs), w=np.asarray(self.ws),
            u=np.asarray(self.us), y=y, events=np.asarray(self.ev),
            regulation_error_tail=float("nan"), event_rate=float("nan"),
            n_samples=n_samples, n_events=n_events,
        )
        if self.k_min is not None:
            incr = float(np.linalg.norm(self.k_max - self.k_min))
            traj.nonlinearity_increment_max = incr
            traj.nonlinearity_bound_violated = bool(incr > self.model.k_b + 1e-12)
        if partial or y_d is None or len(times) == 0:
            return traj
        mask = traj.tail_mask(tail_fraction)
        traj.regulation_error_tail = float(
            np.max(np.linalg.norm(y[mask] - np.asarray(y_d), axis=1)))
        traj.event_rate = n_events / n_samples if n_samples else float("nan")
        return traj


def _check_shapes(model, gains, task, realization):
    if gains.n_u != model.n_u or gains.n_y != model.n_y:
        raise DimensionMismatch("gains do not match model dimensions")
    if task.y_d.size != model.n_y:
        raise DimensionMismatch("target length does not match model output")
    if realization.dA.shape != model.A.shape or realization.dB.shape != model.B.shape:
        raise DimensionMismatch("realization does not match model dimensions")


def simulate_continuous(model: PlantModel, gains: ControllerGains,
                        task: RegulationTask,
                        realization: UncertaintyRealization,
                        cfg: SimConfig) -> Trajectory:
    """Continuous-time closed loop under one uncertainty realization."""
    _check_shapes(model, gains, task, realization)
    Astar = model.A + realization.dA
    Bstar = model.B + realization.dB
    C, y_d = model.C, task.y_d
    Bc, Cc, Dc = gains.B_c, gains.C_c, gains.D_c
    nx = model.n_x
    x0 = np.zeros(nx) if cfg.x0 is None else np.asarray(cfg.x0, float)
    w0 = np.zeros(model.n_u) if cfg.w0 is None else np.asarray(cfg.w0, float)

    kf = _k_closure(realization)

    def f(t, s):
        x, w = s[:nx], s[nx:]
        e = C @ x - y_d
        u = Cc @ w + Dc @ e
        dx = Astar @ x + Bstar @ u
        if kf is not None:
            dx = dx + kf(x)
        return np.concatenate([dx, Bc @ e])

    rec = _Recorder(model, realization)
    s = np.concatenate([x0, w0])

    def u_of(sv):
        return Cc @ sv[nx:] + Dc @ (C @ sv[:nx] - y_d)

    stride = cfg.record_stride
    if stride is None:
        stride = max(1, int(round(cfg.t_end / cfg.rk4_step / 5e4)))
    rec.add(0.0, s[:nx], s[nx:], u_of(s))
    n_total = max(1, int(math.ceil(cfg.t_end / cfg.rk4_step - 1e-12)))
    for i, (t, s) in enumerate(_rk4_span(f, 0.0, s, cfg.t_end, cfg.rk4_step)):
        if i == n_total - 1 or (i + 1) % stride == 0:
            rec.add(t, s[:nx], s[nx:], u_of(s))
    return rec.finish(cfg.tail_fraction, 0, 0, y_d=y_d)


def _normalize_trigger(trigger, block: int) -> TriggerMatrix:
    if trigger is None:
        return TriggerMatrix(Q=np.zeros((2 * block + 1, 2 * block + 1)), block=block)
    if isinstance(trigger, TriggerMatrix):
        if trigger.block != block:
            raise DimensionMismatch("trigger block size does not match model")
        return trigger
    q0, q1 = trigger
    return qtilde(float(q0), float(q1), block)


def _k_closure(realization: UncertaintyRealization):
    """Specialized nonlinearity evaluator for the integration hot path."""
    kind = realization.nonlinearity
    if kind == "none":
        return None
    if kind == "constant":
        c = np.asarray(realization.k_const, dtype=float)
        return lambda x: c
    if kind == "sinusoid":
        amp = 0.5 * realization.k_b
        return lambda x: amp * np.sin(x)
    return realization.k_fn


def simulate_aetc(model: PlantModel, gains: ControllerGains,
                  task: RegulationTask, realization: UncertaintyRealization,
                  cfg: SimConfig) -> Trajectory:
    """Event-triggered emulation over the configured sample schedule.

    At every sample instant the controller state is advanced by its affine
    hold, the stacked information vector ``[w_j; y_j; w_s; y_s; 1]`` is tested
    against the trigger, and on firing the held input is recomputed from the
    sampled values.  The plant integrates between samples with the input held
    constant.  The first sample always sends an input (initialization), so
    update events never outnumber samples.
    """
    _check_shapes(model, gains, task, realization)
    if cfg.sample_schedule is None:
        raise ValueError("simulate_aetc requires a sample schedule")
    Astar = model.A + realization.dA
    Bstar = model.B + realization.dB
    C, y_d = model.C, task.y_d
    Bc, Cc, Dc = gains.B_c, gains.C_c, gains.D_c
    nx = model.n_x
    trig = _normalize_trigger(cfg.trigger, model.n_y + model.n_u)
    # trigger quadratic forms are evaluated in deviation coordinates
    # (w - w_d, y - y_d): the certified bounds quantify deviations, and a
    # relative threshold on raw signal values would leave an absolute error
    # floor that contradicts the zero-threshold exact-tracking regime
    try:
        x_d, u_d, _ = realized_equilibrium(model, realization, y_d)
        w_d = controller_equilibrium(model, gains, x_d, u_d, y_d)
    except EquilibriumInfeasible:
        w_d = np.zeros(model.n_u)
    ts = cfg.sample_times()
    x = np.zeros(nx) if cfg.x0 is None else np.asarray(cfg.x0, float).copy()
    w = np.zeros(model.n_u) if cfg.w0 is None else np.asarray(cfg.w0, float).copy()
    kf = _k_closure(realization)
    stride = cfg.record_stride
    if stride is None:
        stride = max(1, int(round(cfg.t_end / cfg.rk4_step / 5e4)))

    rec = _Recorder(model, realization)
    n_events = 0
    w_j = w.copy()
    y_j = C @ x
    u = Cc @ w_j + Dc @ (y_j - y_d)
    sub_counter = 0

    for s_idx in range(len(ts)):
        t_s = ts[s_idx]
        t_next = ts[s_idx + 1] if s_idx + 1 < len(ts) else cfg.t_end
        y_s = C @ x
        w_s = w.copy()
        if s_idx == 0:
            fired = True        # initialization always sends u_0
        else:
            fired = trig.fires(np.concatenate([w_j - w_d, y_j - y_d]),
                               np.concatenate([w_s - w_d, y_s - y_d]))
        if fired:
            w_j, y_j = w_s.copy(), y_s.copy()
            u = Cc @ w_j + Dc @ (y_j - y_d)
            n_events += 1
        rec.add(t_s, x, w_s, u, event=fired)
        slope = Bc @ (y_s - y_d)
        Bu = Bstar @ u
        span = t_next - t_s
        n_sub = max(1, int(math.ceil(span / cfg.rk4_step - 1e-12)))
        dt = span / n_sub
        half, sixth = 0.5 * dt, dt / 6.0
        last = n_sub - 1
        for i in range(n_sub):
            if kf is None:
                k1 = Astar @ x + Bu
                k2 = Astar @ (x + half * k1) + Bu
                k3 = Astar @ (x + half * k2) + Bu
                k4 = Astar @ (x + dt * k3) + Bu
            else:
                x1 = x
                k1 = Astar @ x1 + Bu + kf(x1)
                x2 = x + half * k1
                k2 = Astar @ x2 + Bu + kf(x2)
                x3 = x + half * k2
                k3 = Astar @ x3 + Bu + kf(x3)
                x4 = x + dt * k3
                k4 = Astar @ x4 + Bu + kf(x4)
            x = x + sixth * (k1 + 2.0 * (k2 + k3) + k4)
            sub_counter += 1
            if i == last or sub_counter % stride == 0:
                t = t_s + (i + 1) * dt
                rec.add(t, x, w_s + (t - t_s) * slope, u)
        w = w_s + span * slope

    return rec.finish(cfg.tail_fraction, len(ts), n_events, y_d=y_d)


# ---------------------------------------------------------------------------
# realization sampling
# ---------------------------------------------------------------------------

def sample_realization(model: PlantModel, mode: str = "uniform",
                       seed: int = 0, nonlinearity: str = "none",
                       k_b: Optional[float] = None,
                       dA: Optional[np.ndarray] = None,
                       dB: Optional[np.ndarray] = None) -> UncertaintyRealization:
    """Draw one admissible uncertainty realization.

    ``uniform`` draws every entry independently uniform inside its interval;
    ``vertex`` picks a random sign pattern at full magnitude; ``custom``
    passes ``dA``/``dB`` through (defaulting to zero).  The draw is
    deterministic in ``seed``.
    """
    kb = model.k_b if k_b is None else float(k_b)
    if mode == "custom":
        dA = np.zeros_like(model.A) if dA is None else np.asarray(dA, float)
        dB = np.zeros_like(model.B) if dB is None else np.asarray(dB, float)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
        if mode == "uniform":
            dA = rng.uniform(-1.0, 1.0, model.A.shape) * model.A_b
            dB = rng.uniform(-1.0, 1.0, model.B.shape) * model.B_b
        elif mode == "vertex":
            dA = (rng.integers(0, 2, model.A.shape) * 2.0 - 1.0) * model.A_b
            dB = (rng.integers(0, 2, model.B.shape) * 2.0 - 1.0) * model.B_b
        else:
            raise ValueError(f"unknown mode {mode!r}")
    kwargs = {}
    if nonlinearity == "constant":
        kwargs["k_const"] = np.full(model.n_x, kb / 2.0)
    return UncertaintyRealization(dA=dA, dB=dB, nonlinearity=nonlinearity,
                                  k_b=kb, **kwargs)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _kb_task(args):
    model_d, gains, task, cfg, kb, seed = args
    model = PlantModel(**model_d, k_b=kb)
    real = sample_realization(model, "uniform", seed=seed,
                              nonlinearity=("sinusoid" if kb > 0 else "none"))
    try:
        traj = simulate_continuous(model, gains, task, real, cfg)
        return traj.regulation_error_tail, float("nan"), None
    except NonFiniteState as exc:
        return float("inf"), float("nan"), str(exc)


def _xi_task(args):
    model_d, gains, task, cfg, kb, trigger, seed = args
    model = PlantModel(**model_d, k_b=kb)
    real = sample_realization(model, "uniform", seed=seed,
                              nonlinearity=("sinusoid" if kb > 0 else "none"))
    cfg = replace(cfg, trigger=trigger)
    try:
        traj = simulate_aetc(model, gains, task, real, cfg)
        return traj.regulation_error_tail, traj.event_rate, None
    except NonFiniteState as exc:
        return float("inf"), float("nan"), str(exc)


def _run_tasks(fn, tasks, jobs: int):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks, chunksize=1))
    return [fn(t) for t in tasks]


def _task_seed(master: int, ri: int) -> int:
    # realizations are keyed by repetition only, so every grid row sees the
    # same draw set; curves stay comparable across the grid
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(ri,))
    return int(ss.generate_state(1)[0])


def _model_fields(model: PlantModel) -> dict:
    return {"A": model.A, "B": model.B, "C": model.C,
            "A_b": model.A_b, "B_b": model.B_b}


def sweep_kb(model: PlantModel, gains: ControllerGains, task: RegulationTask,
             cert: SynthesisCertificate, kb_grid: Sequence[float], reps: int,
             cfg: SimConfig, seed: int = 0, jobs: int = 1):
    """Continuous-loop error versus nonlinearity amplitude.

    For every grid amplitude, ``reps`` fresh uniform realizations with the
    per-coordinate sinusoid nonlinearity are simulated; each row reports the
    worst and mean tail errors against the certified radius at that
    amplitude.
    """
    rows = []
    md = _model_fields(model)
    for gi, kb in enumerate(kb_grid):
        tasks = [(md, gains, task, cfg, float(kb), _task_seed(seed, ri))
                 for ri in range(reps)]
        results = _run_tasks(_kb_task, tasks, jobs)
        errs = [r[0] for r in results]
        failures = sum(1 for r in results if r[2] is not None)
        rows.append({
            "k_b": float(kb),
            "worst_err": float(np.max(errs)),
            "mean_err": float(np.mean(errs)),
            "bound": eps_c(cert, float(kb)),
            "event_rate_mean": float("nan"),
            "reps": reps,
            "failed": failures,
        })
    return rows


def sweep_threshold(model: PlantModel, gains: ControllerGains,
                    task: RegulationTask, cert: SynthesisCertificate,
                    constants: EtcConstants, xi_grid: Sequence[float],
                    reps: int, cfg: SimConfig, seed: int = 0, jobs: int = 1):
    """Event-triggered error and event rate versus the mixed threshold level.

    Uses ``q0 = q1 = xi`` over a fixed sample schedule (one ``cfg`` for all
    rows, so event rates are comparable across thresholds).  Rows report the
    certified quantities (``h_max``, ``f1``, ``f2``, ``eps_d``) at the
    schedule's spacing bound next to the simulated errors; rows where the
    certified bound does not apply are marked undefined but still simulated.
    """
    if cfg.sample_schedule is None:
        raise ValueError("sweep_threshold requires a sample schedule in cfg")
    kind = cfg.sample_schedule[0]
    h_bar = float(cfg.sample_schedule[1] if kind == "periodic"
                  else cfg.sample_schedule[2])
    rows = []
    md = _model_fields(model)
    for gi, xi in enumerate(xi_grid):
        xi = float(xi)
        hm = _h_max(constants, cert.alpha, cert.zeta, xi)
        defined = hm is not None and h_bar <= hm
        v1 = _f1(h_bar, xi, constants, cert.alpha, cert.zeta) if defined else None
        v2 = _f2(h_bar, xi, constants, cert.alpha, cert.zeta) if defined else None
        ed = (eps_d(h_bar, xi, xi, model.k_b, constants, cert.alpha, cert.zeta)
              if defined else None)
        tasks = [(md, gains, task, cfg, model.k_b, (xi, xi),
                  _task_seed(seed, ri)) for ri in range(reps)]
        results = _run_tasks(_xi_task, tasks, jobs)
        errs = [r[0] for r in results]
        rates = [r[1] for r in results if np.isfinite(r[1])]
        failures = sum(1 for r in results if r[2] is not None)
        rows.append({
            "xi": xi, "q0": xi, "q1": xi, "h_bar": h_bar,
            "h_max": hm, "eps_d": ed, "f1": v1, "f2": v2,
            "worst_err": float(np.max(errs)),
            "mean_err": float(np.mean(errs)),
            "bound": ed,
            "event_rate_mean": float(np.mean(rates)) if rates else float("nan"),
            "reps": reps,
            "failed": failures,
        })
    return rows


# ---------------------------------------------------------------------------
# CSV export (17 significant digits for reproducibility)
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def trajectory_to_csv(path, traj: Trajectory):
    nx = traj.x.shape[1]
    nw = traj.w.shape[1]
    nu = traj.u.shape[1]
    ny = traj.y.shape[1]
    header = (["t"] + [f"x{i+1}" for i in range(nx)]
              + [f"w{i+1}" for i in range(nw)] + [f"u{i+1}" for i in range(nu)]
              + [f"y{i+1}" for i in range(ny)] + ["event"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for i in range(len(traj.times)):
            row = ([_fmt(traj.times[i])] + [_fmt(v) for v in traj.x[i]]
                   + [_fmt(v) for v in traj.w[i]] + [_fmt(v) for v in traj.u[i]]
                   + [_fmt(v) for v in traj.y[i]] + [str(int(traj.events[i]))])
            wr.writerow(row)


def sweep_to_csv(path, rows, columns: Optional[Sequence[str]] = None):
    if not rows:
        raise ValueError("no rows to write")
    cols = list(columns) if columns else list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row in rows:
            wr.writerow([_fmt(row.get(c)) for c in cols])
