"""Simulated vehicles, trajectory library, closed-loop rollouts and the tracking-error metric."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .l1 import L1Config, L1Controller
from .lti import discretize_reference, simulate


class DivergedRolloutError(RuntimeError):
    def __init__(self, step: int, msg: str = "non-finite plant state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


def _axis(v, axes):
    a = np.array(np.broadcast_to(np.asarray(v), (axes,)))
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PlantModel:
    """Per-axis velocity lag with drag and input delay, driven by u_L1 + d.

    dv/dt = -(1/tau + drag) v + (gain/tau) (u(t - delay*dt) + d),  dp/dt = v
    d = d_rep(t) - lipschitz_f * clip(v, -v_sat, v_sat) + noise
    """

    gain: np.ndarray = 1.0
    tau: np.ndarray = 0.25
    drag: np.ndarray = 0.35
    delay: np.ndarray = 2
    dist_amplitude: float = 0.1
    dist_freqs: tuple[float, float] = (0.35, 0.9)
    dist_phases: tuple[float, ...] = (0.0, 1.3, 2.6)
    lipschitz_f: float = 0.2
    v_sat: float = 1.0
    noise_std: float = 0.0
    dt_sim: float = 0.01
    axes: int = 3
    name: str = "plant"

    def __post_init__(self):
        for k in ("gain", "tau", "drag"):
            object.__setattr__(self, k, _axis(np.asarray(getattr(self, k), dtype=float), self.axes))
        object.__setattr__(self, "delay", _axis(np.asarray(self.delay, dtype=int), self.axes))
        object.__setattr__(self, "dist_freqs", tuple(float(f) for f in self.dist_freqs))
        object.__setattr__(self, "dist_phases", tuple(float(f) for f in self.dist_phases))
        if np.any(self.tau <= 0) or np.any(self.drag < 0) or np.any(self.delay < 0):
            raise ValueError("need tau > 0, drag >= 0, delay >= 0")
        if self.lipschitz_f < 0 or self.v_sat <= 0 or self.dt_sim <= 0:
            raise ValueError("invalid disturbance or sample-time parameters")
        if len(self.dist_phases) < self.axes:
            raise ValueError("one disturbance phase per axis required")

    def repetitive_disturbance(self, t) -> np.ndarray:
        """Trial-invariant input disturbance, shape (len(t), axes)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))[:, None]
        ph = np.asarray(self.dist_phases[: self.axes])[None, :]
        f1, f2 = self.dist_freqs
        return (self.dist_amplitude / 1.5) * (np.sin(2 * np.pi * f1 * t + ph)
                                              + 0.5 * np.sin(2 * np.pi * f2 * t + 2 * ph))

    def lipschitz_term(self, v) -> np.ndarray:
        return -self.lipschitz_f * np.clip(v, -self.v_sat, self.v_sat)

    def with_(self, **kw) -> PlantModel:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return PlantModel(**d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> PlantModel:
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise ValueError(f"unknown plant keys: {sorted(unknown)}")
        return cls(**d)


def source_like(**kw) -> PlantModel:
    return PlantModel(gain=1.0, tau=0.25, drag=0.35, delay=2, name="source-like").with_(**kw)


def target_like(**kw) -> PlantModel:
    return PlantModel(gain=1.3, tau=0.12, drag=0.20, delay=1, name="target-like").with_(**kw)


def reference_plant(cfg: L1Config, **kw) -> PlantModel:
    """A vehicle whose velocity dynamics equal the inner reference M(s) exactly."""
    base = dict(gain=1.0, tau=1.0 / np.asarray(cfg.m), drag=0.0, delay=0,
                dist_amplitude=0.0, lipschitz_f=0.0, dt_sim=cfg.dt_ctrl, axes=cfg.axes,
                dist_phases=(0.0,) * cfg.axes, name="reference")
    base.update(kw)
    return PlantModel(**base)


PLANTS = {"source-like": source_like, "target-like": target_like}


def make_plant(name: str, **kw) -> PlantModel:
    try:
        return PLANTS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown plant {name!r}; valid: {sorted(PLANTS)}") from None


# --- trajectories -------------------------------------------------------------

# bounds on |k-th discrete derivative| of a reference, k = 1, 2; every library shape meets
# them at the default 6 s duration (shorter durations scale speeds up)
SMOOTHNESS_BOUNDS = (5.0, 20.0)  # m/s, m/s^2

TRAJECTORY_NAMES = ("circle", "lemniscate", "helix-up", "ramp-diagonal", "sine-xy", "rounded-square")


@dataclass(frozen=True)
class Trajectory:
    name: str
    dt: float
    duration: float
    samples: np.ndarray  # y*(k) for k = 0..N, shape (N+1, 3)
    params: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def padded(self, extra: int) -> np.ndarray:
        """Samples 0..N+extra, holding the (resting) final position."""
        return np.vstack([self.samples, np.repeat(self.samples[-1:], extra, axis=0)])

    def to_csv(self, path, comments: tuple[str, ...] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "y", "z"])
            for tk, s in zip(self.t, self.samples):
                w.writerow([repr(float(tk)), *(repr(float(v)) for v in s)])

    @classmethod
    def from_csv(cls, path, name: str | None = None) -> Trajectory:
        rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
        data = np.loadtxt(rows[1:], delimiter=",", ndmin=2)
        t, s = data[:, 0], data[:, 1:]
        dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        traj = cls(name or Path(path).stem, dt, float(t[-1]), s)
        traj.lint_smoothness()
        return traj

    def lint_smoothness(self, bounds=SMOOTHNESS_BOUNDS) -> list[str]:
        """Warn about (and return) derivative bounds the samples exceed; never raises."""
        problems = []
        for k, bound in enumerate(bounds, start=1):
            if self.N < k:
                break
            peak = float(np.max(np.abs(np.diff(self.samples, k, axis=0)))) / self.dt**k
            if peak > bound:
                problems.append(f"order-{k} derivative peaks at {peak:.3g} (bound {bound:g})")
        if problems:
            warnings.warn(f"trajectory {self.name!r} is not smooth: " + "; ".join(problems),
                          RuntimeWarning)
        return problems


def time_scaling(t, T):
    """Smooth 0 -> 1 progress with raised-cosine speed (zero speed at both ends)."""
    tau = np.clip(np.asarray(t) / T, 0.0, 1.0)
    return tau - np.sin(2 * np.pi * tau) / (2 * np.pi)


SHAPE_DEFAULTS = {
    "circle": {"radius": 0.6},
    "lemniscate": {"radius": 0.5},
    "helix-up": {"radius": 0.6, "height": 0.8},
    "ramp-diagonal": {"radius": 1.5, "height": 1.0},
    "sine-xy": {"radius": 1.5, "amplitude": 0.25},
    "rounded-square": {"radius": 0.5, "sharpness": 2.0, "height": 0.4},
}


def _shape(name: str, s: np.ndarray, P: dict) -> np.ndarray:
    R = P["radius"]
    phi = 2 * np.pi * s
    zero = np.zeros_like(s)
    if name == "circle":
        return np.column_stack([R * np.sin(phi), R * (1 - np.cos(phi)), zero])
    if name == "lemniscate":
        return np.column_stack([R * np.sin(phi), 0.5 * R * np.sin(2 * phi), zero])
    if name == "helix-up":
        return np.column_stack([R * np.sin(phi), R * (1 - np.cos(phi)), P["height"] * s])
    if name == "ramp-diagonal":
        return np.column_stack([R * s, R * s, P["height"] * s])
    if name == "sine-xy":
        return np.column_stack([R * s, P["amplitude"] * np.sin(2 * phi), zero])
    if name == "rounded-square":
        k = P["sharpness"]
        # tanh-squashed circle; starts at the origin
        x = np.tanh(k * np.sin(phi)) / np.tanh(k)
        y = 1 - np.tanh(k * np.cos(phi)) / np.tanh(k)
        return np.column_stack([R * x, R * y, 0.5 * P["height"] * np.sin(phi)])
    raise ValueError(f"unknown trajectory {name!r}; valid names: {', '.join(TRAJECTORY_NAMES)}")


def trajectory_library(name: str, duration_s: float = 6.0, dt: float = 0.01, **params) -> Trajectory:
    """Smooth 3-axis trajectory starting at the origin and at rest at both ends.

    ``params`` override the shape defaults (``radius``, ``height``, ...).
    """
    if name not in TRAJECTORY_NAMES:
        raise ValueError(f"unknown trajectory {name!r}; valid names: {', '.join(TRAJECTORY_NAMES)}")
    P = {**SHAPE_DEFAULTS[name], **{k: float(v) for k, v in params.items()}}
    N = int(round(duration_s / dt))
    t = np.arange(N + 1) * dt
    samples = _shape(name, time_scaling(t, duration_s), P)
    return Trajectory(name, float(dt), float(duration_s), samples, P)


# --- rollouts -----------------------------------------------------------------

@dataclass(frozen=True)
class RolloutResult:
    y2: np.ndarray  # positions y2(0..N)
    y1: np.ndarray  # velocities y1(0..N)
    u2: np.ndarray  # applied reference u2(0..N-1)
    u_l1: np.ndarray  # L1 command (0..N-1)
    sigma_hat: np.ndarray  # adaptive estimate after each step
    x_ref: np.ndarray  # reference-model state driven by u2, x(0..N)
    error: float | None

    def to_csv(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("y2", "y1", "u2", "u_l1", "sigma_hat", "x_ref"):
            write_samples(d / f"{name}.csv", getattr(self, name))


def write_samples(path, arr) -> None:
    """One sample per line, channels comma-separated."""
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    buf = io.StringIO()
    for row in arr:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_samples(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _step_coefficients(plant: PlantModel):
    alpha = 1.0 / plant.tau + plant.drag
    beta = plant.gain / plant.tau
    ea = np.exp(-alpha * plant.dt_sim)
    g1 = (1 - ea) / alpha  # integral of e^{-alpha s} over one step
    g2 = (plant.dt_sim - g1) / alpha  # double integral
    return ea, g1, g2, beta


def plant_step(plant: PlantModel, v, pos, u_applied, d, coeffs=None):
    """Advance (velocity, position) one sample.

    Exact for the linear lag and drag under held input; the Lipschitz term is
    evaluated at the start of the step (forward Euler).
    """
    ea, g1, g2, beta = coeffs or _step_coefficients(plant)
    w = beta * (u_applied + d + plant.lipschitz_term(v))
    return ea * v + g1 * w, pos + g1 * v + g2 * w


def rollout(plant: PlantModel, cfg: L1Config, u2, traj: Trajectory | None = None,
            seed: int = 0) -> RolloutResult:
    """Fixed-step closed-loop simulation of plant + L1 stack driven by the reference u2."""
    u2 = np.asarray(u2, dtype=float)
    if u2.ndim != 2 or u2.shape[1] != plant.axes:
        raise ValueError(f"u2 must have shape (N, {plant.axes})")
    dt = plant.dt_sim
    if abs(dt - cfg.dt_ctrl) > 1e-12 or (traj is not None and abs(traj.dt - dt) > 1e-12):
        raise ValueError("plant, controller and trajectory sample times differ")
    N = u2.shape[0]
    rng = np.random.default_rng(seed)
    noise = (plant.noise_std * rng.standard_normal((N, plant.axes))
             if plant.noise_std > 0 else np.zeros((N, plant.axes)))
    d_rep = plant.repetitive_disturbance(np.arange(N) * dt)

    coeffs = _step_coefficients(plant)
    ctrl = L1Controller(cfg)
    v = np.zeros(plant.axes)
    pos = np.zeros(plant.axes)
    y1 = np.empty((N + 1, plant.axes))
    y2 = np.empty((N + 1, plant.axes))
    ul1 = np.empty((N, plant.axes))
    sig = np.empty((N, plant.axes))
    y1[0], y2[0] = v, pos
    cols = np.arange(plant.axes)
    delay = plant.delay
    for k in range(N):
        with np.errstate(over="ignore", invalid="ignore"):
            ul1[k] = ctrl(u2[k], v, pos)
        sig[k] = ctrl.state.sigma_hat
        kd = k - delay
        u_applied = np.where(kd >= 0, ul1[np.maximum(kd, 0), cols], 0.0)
        with np.errstate(over="ignore", invalid="ignore"):
            v, pos = plant_step(plant, v, pos, u_applied, d_rep[k] + noise[k], coeffs)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(pos))):
            raise DivergedRolloutError(k)
        y1[k + 1], y2[k + 1] = v, pos

    ref = discretize_reference(cfg.kp, cfg.m, dt, plant.axes)
    x_ref = simulate(ref, u2).x
    err = tracking_error(traj.samples[1:N + 1], y2[1:]) if traj is not None else None
    return RolloutResult(y2, y1, u2.copy(), ul1, sig, x_ref, err)


def tracking_error(desired, measured) -> float:
    """Mean Euclidean position error over the samples."""
    desired = np.asarray(desired, dtype=float)
    measured = np.asarray(measured, dtype=float)
    if desired.shape != measured.shape:
        raise ValueError(f"length mismatch: {desired.shape} vs {measured.shape}")
    return float(np.mean(np.sqrt(np.sum((desired - measured) ** 2, axis=1))))
