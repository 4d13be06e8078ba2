"""
Forward-time integrators for point-set advection.

``rk4`` takes fixed uniform steps. ``dopri5`` is the embedded Dormand-Prince
4(5) pair with a PI step-size controller, sharing one step size across all
points. Backward motion is always expressed through the negated flow of the
reversed pair, so spans must run forward in time.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SOLVERS = ("rk4", "dopri5")

FlowFn = Callable[[np.ndarray, float], np.ndarray]

# Dormand-Prince tableau (Hairer, Norsett & Wanner)
_C = (0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0)
_A = (
    (),
    (1.0 / 5.0,),
    (3.0 / 40.0, 9.0 / 40.0),
    (44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0),
    (19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0),
    (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0),
    (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0),
)
_B = (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0)
_B_LOW = (5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0)
_E = tuple(b - bl for b, bl in zip(_B, _B_LOW))

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_PI_BETA = 0.04
_PI_ALPHA = 0.2 - 0.75 * _PI_BETA


@dataclass(frozen=True)
class OdeConfig:
    """Integrator choice and its settings."""

    solver: str = "rk4"
    steps: int = 5
    rtol: float = 1e-4
    atol: float = 1e-4
    max_steps: int = 10000

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"Unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if self.solver == "rk4" and int(self.steps) < 1:
            raise ValueError(f"rk4 needs at least one step, got {self.steps}")
        if self.solver == "dopri5":
            if not (self.rtol > 0 and self.atol > 0):
                raise ValueError(f"dopri5 tolerances must be positive, got rtol={self.rtol}, atol={self.atol}")
            if int(self.max_steps) < 1:
                raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")

    @classmethod
    def rk4(cls, steps: int = 5) -> "OdeConfig":
        return cls(solver="rk4", steps=int(steps))

    @classmethod
    def dopri5(cls, rtol: float = 1e-4, atol: float = 1e-4, max_steps: int = 10000) -> "OdeConfig":
        return cls(solver="dopri5", rtol=float(rtol), atol=float(atol), max_steps=int(max_steps))

    @classmethod
    def from_config(cls, config, key: str = "ode.eval") -> "OdeConfig":
        section = config.get(key, {}) or {}
        solver = section.get("solver", "dopri5")
        if solver == "rk4":
            return cls.rk4(section.get("steps", 5))
        return cls.dopri5(section.get("rtol", 1e-4), section.get("atol", 1e-4), section.get("max_steps", 10000))

    def to_dict(self) -> Dict[str, object]:
        if self.solver == "rk4":
            return {"solver": "rk4", "steps": int(self.steps)}
        return {"solver": "dopri5", "rtol": self.rtol, "atol": self.atol, "max_steps": int(self.max_steps)}


@dataclass
class Trajectory:
    """Recorded (time, state) snapshots of one integration."""

    times: List[float] = field(default_factory=list)
    states: List[np.ndarray] = field(default_factory=list)
    accepted_steps: int = 0
    rejected_steps: int = 0

    def record(self, t: float, state: np.ndarray) -> None:
        self.times.append(float(t))
        self.states.append(np.array(state, copy=True))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.times)


class IntegrationError(RuntimeError):
    """Adaptive integration gave up; ``trajectory`` holds what was computed."""

    def __init__(self, message: str, trajectory: Trajectory):
        super().__init__(message)
        self.trajectory = trajectory


def _check_span(span: Tuple[float, float]) -> Tuple[float, float]:
    t0, t1 = float(span[0]), float(span[1])
    if not (0.0 <= t0 < t1 <= 1.0):
        raise ValueError(f"Integration span must satisfy 0 <= t0 < t1 <= 1, got ({t0}, {t1})")
    return t0, t1


def rk4_step(flow: FlowFn, x, t: float, t_next: float):
    """One classical RK4 step; works on numpy arrays and tape Vars alike."""
    h = t_next - t
    t_mid = t + 0.5 * h
    k1 = flow(x, t)
    k2 = flow(x + k1 * (0.5 * h), t_mid)
    k3 = flow(x + k2 * (0.5 * h), t_mid)
    k4 = flow(x + k3 * h, t_next)
    return x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)


def rk4_times(span: Tuple[float, float], steps: int) -> List[float]:
    t0, t1 = span
    times = [t0 + (t1 - t0) * k / steps for k in range(steps)]
    times.append(t1)
    return times


def _integrate_rk4(flow: FlowFn, x0: np.ndarray, span, steps: int) -> Trajectory:
    traj = Trajectory()
    times = rk4_times(span, steps)
    x = x0
    traj.record(times[0], x)
    for k in range(steps):
        x = rk4_step(flow, x, times[k], times[k + 1])
        traj.record(times[k + 1], x)
        traj.accepted_steps += 1
    return traj


def _error_norm(err: np.ndarray, y_old: np.ndarray, y_new: np.ndarray, rtol: float, atol: float) -> float:
    if err.size == 0:
        return 0.0
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.max(np.abs(err) / scale))


def _integrate_dopri5(flow: FlowFn, x0: np.ndarray, span, cfg: OdeConfig,
                      record_times: Optional[Sequence[float]]) -> Trajectory:
    t0, t1 = span
    traj = Trajectory()
    traj.record(t0, x0)

    marks = None
    if record_times is not None:
        marks = sorted({float(t) for t in record_times if t0 < float(t) < t1})
    next_mark = 0

    t = t0
    y = x0
    h = 0.1 * (t1 - t0)
    prev_err = 1e-4
    k1 = flow(y, t)
    attempts = 0

    while t < t1:
        if attempts >= cfg.max_steps:
            raise IntegrationError(
                f"dopri5 exceeded {cfg.max_steps} steps at t={t:.6g} (rtol={cfg.rtol}, atol={cfg.atol})", traj)
        attempts += 1

        stop = t1
        if marks is not None and next_mark < len(marks):
            stop = marks[next_mark]
        landing = t + h >= stop
        if landing:
            h = stop - t
        t_new = stop if landing else t + h

        ks = [k1]
        for stage in range(1, 7):
            incr = sum(a * k for a, k in zip(_A[stage], ks) if a != 0.0)
            t_stage = t_new if stage >= 5 else min(t + _C[stage] * h, t_new)
            ks.append(flow(y + incr * h, t_stage))
        y_new = y + h * sum(b * k for b, k in zip(_B, ks) if b != 0.0)
        err = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)

        if not np.all(np.isfinite(y_new)):
            raise IntegrationError(f"dopri5 produced non-finite states at t={t:.6g}", traj)

        norm = _error_norm(err, y, y_new, cfg.rtol, cfg.atol)
        if norm <= 1.0:
            t, y = t_new, y_new
            k1 = ks[6]  # first-same-as-last
            traj.accepted_steps += 1
            if marks is None or landing:
                traj.record(t, y)
            if landing and marks is not None and next_mark < len(marks):
                next_mark += 1
            factor = _MAX_FACTOR if norm == 0.0 else _SAFETY * norm ** (-_PI_ALPHA) * prev_err ** _PI_BETA
            prev_err = max(norm, 1e-4)
        else:
            traj.rejected_steps += 1
            factor = max(_MIN_FACTOR, _SAFETY * norm ** (-0.2))
        h = h * min(_MAX_FACTOR, max(_MIN_FACTOR, factor))

        if t < t1 and h <= 1e-14 * (t1 - t0):
            raise IntegrationError(f"dopri5 step size underflow at t={t:.6g}", traj)

    if traj.times[-1] != t1:
        traj.record(t1, y)
    return traj


def integrate(flow: FlowFn, x0, span: Tuple[float, float] = (0.0, 1.0), cfg: Optional[OdeConfig] = None,
              record_times: Optional[Sequence[float]] = None) -> Trajectory:
    """
    Integrate dx/dt = flow(x, t) forward over ``span``.

    Args:
        flow: Closure mapping (points, t) to velocities
        x0: Initial point set
        span: (t0, t1) with 0 <= t0 < t1 <= 1
        cfg: Integrator settings (RK4 with 5 steps by default)
        record_times: dopri5 only; land on and record exactly these times

    Returns:
        Trajectory: Snapshots from t0 to t1
    """
    cfg = cfg or OdeConfig.rk4()
    span = _check_span(span)
    x0 = np.array(x0, dtype=np.float64, copy=True)

    if cfg.solver == "rk4":
        traj = _integrate_rk4(flow, x0, span, int(cfg.steps))
    else:
        traj = _integrate_dopri5(flow, x0, span, cfg, record_times)

    logger.debug(f"{cfg.solver} over {span}: {traj.accepted_steps} accepted, {traj.rejected_steps} rejected steps")
    return traj
