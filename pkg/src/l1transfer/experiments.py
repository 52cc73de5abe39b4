"""Experiment pipelines: learn, transfer, one-to-all matrix, repeatability, different reference models.

Every pipeline is a pure function of an :class:`ExperimentConfig`; the report
writers embed the canonical config JSON as ``#`` comment lines at the top of
each CSV so a report can be regenerated from its own header.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .ilc import IlcConfig, KalmanConfig, LearningRecord, run_ilc
from .l1 import ControllerFault, L1Config
from .lti import (StateSpaceModel, discretize_reference, estimate_relative_degree_from_steps,
                  lifted_representation, minimum_phase_check, step_experiments,
                  vector_relative_degree)
from .plant import (PLANTS, TRAJECTORY_NAMES, DivergedRolloutError, PlantModel, Trajectory,
                    make_plant, read_samples, rollout, trajectory_library, write_samples)
from .qp import QPInfeasibleError, QPSolverError
from .transfer import (ModelFeedback, TransferMap, apply_transfer_map_online, build_window_io,
                       build_window_state, fit_transfer_map, map_between_reference_models,
                       nominal_inverse_theta, perfect_tracking_input, state_reconstructor)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration or missing inputs."""


class ExperimentFault(RuntimeError):
    """A rollout diverged or the QP solver failed during an experiment."""


FAULTS = (DivergedRolloutError, ControllerFault, QPSolverError, QPInfeasibleError)

# mean first-iteration reductions measured on quadrotor hardware; printed as a qualitative
# reference next to the simulated figures
HARDWARE_MATRIX_REDUCTION = 74.12
HARDWARE_DIFF_REF_REDUCTION = 74.86


# --- configuration --------------------------------------------------------------

def _check_keys(d: dict, allowed: Iterable[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class SideConfig:
    """One vehicle: plant id, plant parameter overrides and its L1 controller."""

    plant: str
    l1: L1Config = field(default_factory=L1Config)
    overrides: dict = field(default_factory=dict)

    def build_plant(self, noise_std: float | None = None) -> PlantModel:
        kw = dict(self.overrides)
        kw["dt_sim"] = self.l1.dt_ctrl
        kw["axes"] = self.l1.axes
        if noise_std is not None:
            kw["noise_std"] = noise_std
        return make_plant(self.plant, **kw)

    def to_dict(self) -> dict:
        return {"plant": self.plant, "l1": self.l1.to_dict(), "overrides": dict(self.overrides)}

    @classmethod
    def from_dict(cls, d: dict, where: str) -> SideConfig:
        _check_keys(d, ("plant", "l1", "overrides"), where)
        plant = d.get("plant")
        if plant not in PLANTS:
            raise ConfigError(f"{where}.plant must be one of {sorted(PLANTS)}, got {plant!r}")
        try:
            side = cls(plant, L1Config.from_dict(d.get("l1", {})), dict(d.get("overrides", {})))
            side.build_plant()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
        return side


@dataclass(frozen=True)
class TransferSettings:
    """How transfer maps are fit and applied.

    ``ridge`` is a per-regressor-row weight; with ``prior="nominal"`` it pulls the
    fit toward the exact inversion law of the transfer model, with ``prior="none"``
    toward zero.
    """

    variant: str = "state"
    nbar: int | None = None
    enabled: bool = True
    source_trajectory: str = "circle"
    target_trajectory: str = "lemniscate"
    rcond: float = 1e-10
    ridge: float = 1e-4
    prior: str = "nominal"


@dataclass(frozen=True)
class RepeatSettings:
    repetitions: int = 10
    noise_std: float = 0.01


@dataclass(frozen=True)
class DiffRefSettings:
    """L1 parameter overrides applied to the target vehicle for the diff-ref experiment."""

    target_l1: dict = field(default_factory=lambda: {"m": 8.0})


@dataclass(frozen=True)
class ExperimentConfig:
    source: SideConfig = field(default_factory=lambda: SideConfig("source-like"))
    target: SideConfig = field(default_factory=lambda: SideConfig("target-like"))
    ilc: IlcConfig = field(default_factory=IlcConfig)
    trajectories: tuple[str, ...] = TRAJECTORY_NAMES
    duration_s: float = 6.0
    iterations: int = 10
    seed: int = 0
    transfer: TransferSettings = field(default_factory=TransferSettings)
    repeat: RepeatSettings = field(default_factory=RepeatSettings)
    diff_ref: DiffRefSettings = field(default_factory=DiffRefSettings)
    workers: int = 1

    def __post_init__(self):
        bad = [t for t in self.trajectories if t not in TRAJECTORY_NAMES]
        if bad or not self.trajectories:
            raise ConfigError(f"unknown trajectories {bad}; valid: {list(TRAJECTORY_NAMES)}")
        for t in (self.transfer.source_trajectory, self.transfer.target_trajectory):
            if t not in TRAJECTORY_NAMES:
                raise ConfigError(f"unknown transfer trajectory {t!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError("seed must be an explicit unsigned 64-bit integer")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.transfer.variant not in ("state", "io"):
            raise ConfigError("transfer.variant must be 'state' or 'io'")
        if self.transfer.prior not in ("nominal", "none") or self.transfer.ridge < 0:
            raise ConfigError("transfer.prior must be 'nominal' or 'none' and ridge >= 0")
        if self.repeat.repetitions < 1 or self.repeat.noise_std < 0:
            raise ConfigError("repeat needs repetitions >= 1 and noise_std >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if abs(self.source.l1.dt_ctrl - self.target.l1.dt_ctrl) > 1e-15:
            raise ConfigError("source and target controllers must share dt_ctrl")
        if self.source.l1.axes != 3 or self.target.l1.axes != 3:
            raise ConfigError("experiments use three axes")

    @property
    def dt(self) -> float:
        return self.source.l1.dt_ctrl

    @property
    def N(self) -> int:
        return int(round(self.duration_s / self.dt))

    def with_(self, **kw) -> ExperimentConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        t, r = self.transfer, self.repeat
        return {
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "ilc": self.ilc.to_dict(),
            "trajectories": list(self.trajectories),
            "duration_s": self.duration_s,
            "iterations": self.iterations,
            "seed": self.seed,
            "transfer": {f.name: getattr(t, f.name) for f in fields(t)},
            "repeat": {f.name: getattr(r, f.name) for f in fields(r)},
            "diff_ref": {"target_l1": dict(self.diff_ref.target_l1)},
            "workers": self.workers,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        top = ("source", "target", "ilc", "trajectories", "duration_s", "iterations", "seed",
               "transfer", "repeat", "diff_ref", "workers")
        _check_keys(d, top, "config")
        kw: dict[str, Any] = {}
        if "source" in d:
            kw["source"] = SideConfig.from_dict(d["source"], "source")
        if "target" in d:
            kw["target"] = SideConfig.from_dict(d["target"], "target")
        if "ilc" in d:
            _check_keys(d["ilc"], ("Q", "R", "R_diff", "kalman"), "ilc")
            try:
                kw["ilc"] = IlcConfig.from_dict(d["ilc"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"ilc: {exc}") from None
        for key, typ in (("duration_s", float), ("iterations", int), ("workers", int)):
            if key in d:
                try:
                    kw[key] = typ(d[key])
                except (TypeError, ValueError):
                    raise ConfigError(f"{key} must be a number") from None
        if "seed" in d:
            if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
                raise ConfigError("seed must be an integer")
            kw["seed"] = d["seed"]
        if "trajectories" in d:
            kw["trajectories"] = tuple(d["trajectories"])
        for key, klass in (("transfer", TransferSettings), ("repeat", RepeatSettings),
                           ("diff_ref", DiffRefSettings)):
            if key in d:
                _check_keys(d[key], [f.name for f in fields(klass)], key)
                kw[key] = klass(**d[key])
        try:
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    def learn_fingerprint(self) -> str:
        """Hash of everything that determines a learned source input."""
        d = self.to_dict()
        sub = {k: d[k] for k in ("source", "ilc", "duration_s", "iterations", "seed")}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]


# --- reports --------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass(frozen=True)
class Report:
    """A CSV report: fixed columns with declared types, plus header comment lines."""

    name: str
    columns: tuple[str, ...]
    types: tuple[type, ...]
    rows: list = field(default_factory=list)

    def validate(self) -> None:
        if len(self.columns) != len(self.types):
            raise ValueError(f"report {self.name}: schema length mismatch")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.columns):
                raise ValueError(f"report {self.name} row {i}: expected {len(self.columns)} cells")
            for col, typ, v in zip(self.columns, self.types, row):
                if typ is float:
                    if not isinstance(v, (int, float, np.integer, np.floating)):
                        raise ValueError(f"report {self.name} row {i}: {col} is not numeric")
                    if math.isnan(float(v)):
                        raise ValueError(f"report {self.name} row {i}: {col} is NaN")
                elif typ is int:
                    if not isinstance(v, (int, np.integer, bool, np.bool_)):
                        raise ValueError(f"report {self.name} row {i}: {col} is not an integer")
                elif not isinstance(v, str) or "," in v or "\n" in v:
                    raise ValueError(f"report {self.name} row {i}: {col} is not a plain string")

    def render(self, config: ExperimentConfig | None, notes: Sequence[str] = ()) -> str:
        self.validate()
        lines = []
        if config is not None:
            lines.append(f"# config: {config.canonical_json()}")
        lines.extend(f"# {n}" for n in notes)
        lines.append(",".join(self.columns))
        lines.extend(",".join(format_value(v) for v in row) for row in self.rows)
        return "\n".join(lines) + "\n"

    def write(self, path, config: ExperimentConfig | None, notes: Sequence[str] = ()) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render(config, notes))
        return path


def read_report(path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def read_header_config(path) -> dict | None:
    for ln in Path(path).read_text().splitlines():
        if ln.startswith("# config: "):
            return json.loads(ln[len("# config: "):])
        if not ln.startswith("#"):
            break
    return None


def _write_samples_with_header(path, arr, config: ExperimentConfig, notes: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    write_samples(tmp, arr)
    head = [f"# config: {config.canonical_json()}"] + [f"# {n}" for n in notes]
    path.write_text("\n".join(head) + "\n" + tmp.read_text())
    tmp.unlink()


# --- shared building blocks ------------------------------------------------------

@lru_cache(maxsize=8)
def _lifted(kp: tuple, m: tuple, dt: float, N: int) -> np.ndarray:
    F = lifted_representation(discretize_reference(np.array(kp), np.array(m), dt), N).F
    F.setflags(write=False)
    return F


def lifted_for(l1: L1Config, N: int) -> np.ndarray:
    """Lifted ZOH reference model used as the ILC's F."""
    return _lifted(tuple(l1.kp.tolist()), tuple(l1.m.tolist()), float(l1.dt_ctrl), int(N))


def reference_model(l1: L1Config, method: str = "zoh") -> StateSpaceModel:
    return discretize_reference(l1.kp, l1.m, l1.dt_ctrl, l1.axes, method=method)


def transfer_model(l1: L1Config) -> StateSpaceModel:
    """Reference model whose states the transfer map is regressed on (Euler discretization)."""
    return reference_model(l1, "euler")


def trajectory(cfg: ExperimentConfig, name: str) -> Trajectory:
    return trajectory_library(name, cfg.duration_s, cfg.dt)


def iteration_seed(seed: int, *path: int) -> int:
    """Deterministic per-rollout noise seed derived from the experiment seed."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1, dtype=np.uint64)[0])


def _rollout_fn(plant: PlantModel, l1: L1Config, traj: Trajectory, seed: int, arm: int) -> Callable:
    counter = [0]

    def fn(u):
        counter[0] += 1
        return rollout(plant, l1, u, traj, seed=iteration_seed(seed, arm, counter[0])).y2[1:]
    return fn


def run_learning(side: SideConfig, ilc: IlcConfig, traj: Trajectory, iterations: int,
                 warm_start, seed: int = 0, noise_std: float | None = None,
                 arm: int = 0, keep_partial: bool = False) -> LearningRecord:
    """ILC on one vehicle.

    Faults propagate as :class:`ExperimentFault`, unless ``keep_partial`` is set, in
    which case the partial record is returned with ``record.fault`` populated.
    """
    plant = side.build_plant(noise_std)
    F = lifted_for(side.l1, traj.N)
    fn = _rollout_fn(plant, side.l1, traj, seed, arm)
    try:
        rec = run_ilc(fn, F, ilc, traj.samples[1:], iterations, warm_start=warm_start,
                      raise_faults=not keep_partial)
    except FAULTS as exc:
        raise ExperimentFault(f"{type(exc).__name__}: {exc}") from exc
    if rec.fault is not None and not isinstance(rec.fault, FAULTS):
        raise rec.fault
    return rec


def identity_warm_start(traj: Trajectory) -> np.ndarray:
    """The no-transfer baseline input: the desired trajectory itself, u(k) = y*(k)."""
    return traj.samples[:-1].copy()


def _padded(traj: Trajectory, r) -> np.ndarray:
    return traj.padded(max(r) - 1) if max(r) > 1 else traj.samples


def nominal_map_theta(model: StateSpaceModel, variant: str, nbar: int | None = None) -> np.ndarray:
    """Parameters of the exact inversion law of ``model`` in state or I/O-window form."""
    vrd = vector_relative_degree(model)
    theta0 = nominal_inverse_theta(model, vrd)
    if variant == "state":
        return theta0
    rec = state_reconstructor(model, nbar)
    tx, ty = theta0[: model.n], theta0[model.n:]
    return np.vstack([rec.M_u.T @ tx, rec.M_y.T @ tx, ty])


def fit_source_map(l1: L1Config, traj: Trajectory, u_learned, settings: TransferSettings,
                   model: StateSpaceModel | None = None) -> TransferMap:
    """Fit theta on the perfect-tracking states of the transfer model for the source trajectory."""
    model = model or transfer_model(l1)
    vrd = vector_relative_degree(model)
    yd = _padded(traj, vrd.r)
    u_star, x_star = perfect_tracking_input(model, vrd, yd, N=traj.N, check_phase=False)
    u = np.asarray(u_learned, dtype=float)
    nbar = None
    if settings.variant == "state":
        W = build_window_state(x_star, yd, vrd)
    else:
        nbar = settings.nbar or model.n
        W = build_window_io(u_star, x_star @ model.C.T, yd, vrd, nbar, start=0)
    prior = nominal_map_theta(model, settings.variant, nbar) if settings.prior == "nominal" else None
    return fit_transfer_map(W, u[: W.shape[0]], vrd, settings.variant, nbar=nbar,
                            rcond=settings.rcond, ridge=settings.ridge * W.shape[0], prior=prior)


def transferred_input(tmap: TransferMap, l1: L1Config, traj: Trajectory,
                      model: StateSpaceModel | None = None) -> np.ndarray:
    """Apply a map online along a new trajectory, fed back by the simulated transfer model."""
    model = model or transfer_model(l1)
    with np.errstate(over="ignore", invalid="ignore"):
        u = apply_transfer_map_online(tmap, _padded(traj, tmap.r), ModelFeedback(model), N=traj.N)
    if not np.all(np.isfinite(u)):
        raise ExperimentFault(f"transfer map diverged online on trajectory {traj.name!r}")
    return u


def nominal_input(l1: L1Config, traj: Trajectory, variant: str = "state") -> np.ndarray:
    """Input from the nominal inversion law alone (no learned data), for diagnostics."""
    model = transfer_model(l1)
    tmap = TransferMap("state", nominal_map_theta(model, "state"),
                       vector_relative_degree(model).r)
    return transferred_input(tmap, l1, traj, model)


def percent_reduction(e_no: float, e_xfer: float) -> float:
    return 100.0 * (e_no - e_xfer) / e_no


def _pool_map(fn: Callable, items: list, workers: int) -> list:
    """Ordered map; results are identical whatever the worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# --- learn ------------------------------------------------------------------------

@dataclass(frozen=True)
class LearnResult:
    trajectory: Trajectory
    record: LearningRecord
    u_learned: np.ndarray | None  # None when no iteration completed

    @property
    def fault(self) -> str | None:
        f = self.record.fault
        return None if f is None else f"{type(f).__name__}: {f}"


def learn(cfg: ExperimentConfig, name: str) -> LearnResult:
    """ILC on the source vehicle starting from the identity warm start; keeps partial records."""
    traj = trajectory(cfg, name)
    rec = run_learning(cfg.source, cfg.ilc, traj, cfg.iterations, identity_warm_start(traj),
                       seed=cfg.seed, keep_partial=True)
    return LearnResult(traj, rec, rec.iterations[-1].u if rec.iterations else None)


def _learn_job(args):
    cfg_dict, name = args
    return learn(ExperimentConfig.from_dict(cfg_dict), name)


def learn_all(cfg: ExperimentConfig, names: Sequence[str]) -> dict[str, LearnResult]:
    res = _pool_map(_learn_job, [(cfg.to_dict(), n) for n in names], cfg.workers)
    return dict(zip(names, res))


def learned_paths(out: Path, name: str) -> dict[str, Path]:
    d = Path(out) / "learned"
    return {"record": d / f"{name}.record.csv", "input": d / f"{name}.u.csv",
            "trajectory": d / f"{name}.trajectory.csv"}


def learning_report(rec: LearningRecord) -> Report:
    rows = [[it.iteration, it.error, it.max_input, it.active] for it in rec.iterations]
    return Report("learning", ("iteration", "error", "max_input", "constraint_active"),
                  (int, float, float, int), rows)


def write_learned(out, cfg: ExperimentConfig, name: str, res: LearnResult) -> list[Path]:
    """Write the learning record, the learned input and the trajectory.

    A faulted run writes its partial record (with the fault in the header) and no
    learned input, so downstream commands cannot pick it up.
    """
    p = learned_paths(out, name)
    fp = f"learn_fingerprint: {cfg.learn_fingerprint()}"
    notes = [f"trajectory: {name}", fp] + ([f"fault: {res.fault}"] if res.fault else [])
    learning_report(res.record).write(p["record"], cfg, notes)
    if res.fault or res.u_learned is None:
        p["input"].unlink(missing_ok=True)
        return [p["record"]]
    _write_samples_with_header(p["input"], res.u_learned, cfg,
                               [f"trajectory: {name}", fp, "u2(k) for k = 0..N-1, columns x,y,z"])
    p["trajectory"].parent.mkdir(parents=True, exist_ok=True)
    res.trajectory.to_csv(p["trajectory"], (f"config: {cfg.canonical_json()}", f"trajectory: {name}"))
    return list(p.values())


def load_learned(out, cfg: ExperimentConfig, names: Sequence[str]) -> dict[str, np.ndarray]:
    """Learned source inputs; all missing or stale artifacts are reported together."""
    problems, result = [], {}
    want = f"# learn_fingerprint: {cfg.learn_fingerprint()}"
    for n in names:
        path = learned_paths(out, n)["input"]
        if not path.exists():
            problems.append(f"missing {path}")
            continue
        if want not in path.read_text().splitlines():
            problems.append(f"stale {path} (learned with a different source/ILC config)")
            continue
        u = read_samples(path)
        if u.shape != (cfg.N, 3):
            problems.append(f"{path} has shape {u.shape}, expected {(cfg.N, 3)}")
            continue
        result[n] = u
    if problems:
        raise ConfigError("learned artifacts unavailable; run `learn` first:\n  "
                          + "\n  ".join(problems))
    return result


# --- matrix ------------------------------------------------------------------------

def first_iteration_error(side: SideConfig, ilc: IlcConfig, traj: Trajectory, u_warm,
                          seed: int, arm: int = 0) -> float:
    rec = run_learning(side, ilc, traj, 1, u_warm, seed=seed, arm=arm)
    return float(rec.errors[0])


def _baseline_job(args):
    """First-iteration errors of the no-transfer arm and of the nominal-inverse diagnostic."""
    cfg_dict, name = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    traj = trajectory(cfg, name)
    e_no = first_iteration_error(cfg.target, cfg.ilc, traj, identity_warm_start(traj), cfg.seed)
    e_nom = first_iteration_error(cfg.target, cfg.ilc, traj, nominal_input(cfg.source.l1, traj),
                                  cfg.seed)
    return e_no, e_nom


def _cell_job(args):
    cfg_dict, src_name, tgt_name, u_learned = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    src, tgt = trajectory(cfg, src_name), trajectory(cfg, tgt_name)
    if not cfg.transfer.enabled:
        u = identity_warm_start(tgt)
    else:
        tmap = fit_source_map(cfg.source.l1, src, u_learned, cfg.transfer)
        u = transferred_input(tmap, cfg.source.l1, tgt)
    return first_iteration_error(cfg.target, cfg.ilc, tgt, u, cfg.seed)


@dataclass(frozen=True)
class MatrixResult:
    names: tuple[str, ...]
    e_noxfer: np.ndarray  # per target trajectory
    e_xfer: np.ndarray  # [source, target]
    e_nominal: np.ndarray  # per target: nominal inversion law, no learned data

    @property
    def reduction(self) -> np.ndarray:
        return 100.0 * (self.e_noxfer[None, :] - self.e_xfer) / self.e_noxfer[None, :]

    @property
    def mean_reduction(self) -> float:
        return float(np.mean(self.reduction))

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.reduction).copy()


def matrix(cfg: ExperimentConfig, learned: dict[str, np.ndarray]) -> MatrixResult:
    names = tuple(cfg.trajectories)
    d = cfg.to_dict()
    base = np.array(_pool_map(_baseline_job, [(d, n) for n in names], cfg.workers))
    jobs = [(d, s, t, learned[s]) for s in names for t in names]
    cells = _pool_map(_cell_job, jobs, cfg.workers)
    return MatrixResult(names, base[:, 0], np.array(cells).reshape(len(names), len(names)),
                        base[:, 1])


def matrix_reports(res: MatrixResult) -> tuple[Report, Report, Report]:
    n = res.names
    nominal = 100.0 * (res.e_noxfer - res.e_nominal) / res.e_noxfer
    cells = Report("matrix_cells", ("source", "target", "e_noxfer", "e_xfer", "reduction_pct",
                                    "e_nominal", "nominal_reduction_pct"),
                   (str, str, float, float, float, float, float),
                   [[s, t, res.e_noxfer[j], res.e_xfer[i, j], res.reduction[i, j],
                     res.e_nominal[j], nominal[j]]
                    for i, s in enumerate(n) for j, t in enumerate(n)])
    grid = Report("matrix", ("source",) + n, (str,) + (float,) * len(n),
                  [[s, *res.reduction[i]] for i, s in enumerate(n)])
    summary = Report("matrix_summary", ("metric", "value"), (str, float),
                     [["mean_reduction_pct", res.mean_reduction],
                      ["min_diagonal_reduction_pct", float(res.diagonal.min())],
                      ["max_offdiagonal_reduction_pct",
                       float(np.max(res.reduction[~np.eye(len(n), dtype=bool)]))
                       if len(n) > 1 else float("inf")],
                      ["mean_nominal_reduction_pct", float(np.mean(nominal))],
                      ["reference_hardware_mean_pct", HARDWARE_MATRIX_REDUCTION]])
    return cells, grid, summary


# --- transfer (single pair, continued learning) -----------------------------------------

@dataclass(frozen=True)
class TransferResult:
    tmap: TransferMap
    xfer: LearningRecord
    noxfer: LearningRecord

    @property
    def reduction(self) -> float:
        return percent_reduction(self.noxfer.errors[0], self.xfer.errors[0])


def transfer_pair(cfg: ExperimentConfig, u_learned, iterations: int | None = None,
                  noise_std: float | None = None, seed: int | None = None) -> TransferResult:
    J = cfg.iterations if iterations is None else iterations
    seed = cfg.seed if seed is None else seed
    src = trajectory(cfg, cfg.transfer.source_trajectory)
    tgt = trajectory(cfg, cfg.transfer.target_trajectory)
    tmap = fit_source_map(cfg.source.l1, src, u_learned, cfg.transfer)
    u = transferred_input(tmap, cfg.source.l1, tgt) if cfg.transfer.enabled else identity_warm_start(tgt)
    xfer = run_learning(cfg.target, cfg.ilc, tgt, J, u, seed, noise_std, arm=1)
    nox = run_learning(cfg.target, cfg.ilc, tgt, J, identity_warm_start(tgt), seed, noise_std, arm=2)
    return TransferResult(tmap, xfer, nox)


def transfer_report(res: TransferResult) -> Report:
    rows = [[a.iteration, a.error, b.error, percent_reduction(b.error, a.error)]
            for a, b in zip(res.xfer.iterations, res.noxfer.iterations)]
    return Report("transfer", ("iteration", "e_xfer", "e_noxfer", "reduction_pct"),
                  (int, float, float, float), rows)


# --- repeat --------------------------------------------------------------------------

def _repeat_job(args):
    cfg_dict, u_learned, rep = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    res = transfer_pair(cfg, u_learned, noise_std=cfg.repeat.noise_std,
                        seed=iteration_seed(cfg.seed, 1000 + rep))
    return res.xfer.errors, res.noxfer.errors


@dataclass(frozen=True)
class RepeatResult:
    xfer: np.ndarray  # [repetition, iteration]
    noxfer: np.ndarray

    def stats(self):
        return (self.xfer.mean(0), self.xfer.std(0), self.noxfer.mean(0), self.noxfer.std(0))


def repeat(cfg: ExperimentConfig, u_learned) -> RepeatResult:
    jobs = [(cfg.to_dict(), u_learned, rep) for rep in range(cfg.repeat.repetitions)]
    out = _pool_map(_repeat_job, jobs, cfg.workers)
    return RepeatResult(np.array([o[0] for o in out]), np.array([o[1] for o in out]))


def repeat_report(res: RepeatResult) -> Report:
    xm, xs, nm, ns = res.stats()
    rows = [[j + 1, xm[j], xs[j], nm[j], ns[j]] for j in range(xm.size)]
    return Report("repeat", ("iteration", "xfer_mean", "xfer_std", "noxfer_mean", "noxfer_std"),
                  (int, float, float, float, float), rows)


# --- different reference models ----------------------------------------------------------

def diff_ref_target(cfg: ExperimentConfig) -> SideConfig:
    try:
        l1 = cfg.target.l1.with_(**cfg.diff_ref.target_l1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"diff_ref.target_l1: {exc}") from None
    return replace(cfg.target, l1=l1)


def mapped_source_input(cfg: ExperimentConfig, target: SideConfig, u_learned) -> np.ndarray:
    """Learned source input re-expressed for the target's reference model."""
    return map_between_reference_models(u_learned, reference_model(cfg.source.l1),
                                        reference_model(target.l1))


def _diff_ref_job(args):
    cfg_dict, src_name, tgt_name, u_learned = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    target = diff_ref_target(cfg)
    src, tgt = trajectory(cfg, src_name), trajectory(cfg, tgt_name)
    u_mapped = mapped_source_input(cfg, target, u_learned)
    tmap = fit_source_map(target.l1, src, u_mapped, cfg.transfer)
    e_map = first_iteration_error(target, cfg.ilc, tgt,
                                  transferred_input(tmap, target.l1, tgt), cfg.seed)
    naive = fit_source_map(cfg.source.l1, src, u_learned, cfg.transfer)
    e_naive = first_iteration_error(target, cfg.ilc, tgt,
                                    transferred_input(naive, cfg.source.l1, tgt), cfg.seed)
    e_no = first_iteration_error(target, cfg.ilc, tgt, identity_warm_start(tgt), cfg.seed)
    return e_no, e_map, e_naive


@dataclass(frozen=True)
class DiffRefResult:
    pairs: tuple[tuple[str, str], ...]
    e_noxfer: np.ndarray
    e_mapped: np.ndarray
    e_naive: np.ndarray

    @property
    def reduction_mapped(self) -> np.ndarray:
        return 100.0 * (self.e_noxfer - self.e_mapped) / self.e_noxfer

    @property
    def reduction_naive(self) -> np.ndarray:
        return 100.0 * (self.e_noxfer - self.e_naive) / self.e_noxfer


def diff_ref(cfg: ExperimentConfig, learned: dict[str, np.ndarray],
             pairs: Sequence[tuple[str, str]] | None = None) -> DiffRefResult:
    """One source trajectory to every configured target, on a target with a modified reference model."""
    if pairs is None:
        s = cfg.transfer.source_trajectory
        pairs = [(s, t) for t in cfg.trajectories]
    d = cfg.to_dict()
    out = _pool_map(_diff_ref_job, [(d, s, t, learned[s]) for s, t in pairs], cfg.workers)
    arr = np.array(out)
    return DiffRefResult(tuple(tuple(p) for p in pairs), arr[:, 0], arr[:, 1], arr[:, 2])


def diff_ref_reports(res: DiffRefResult) -> tuple[Report, Report]:
    rows = [[s, t, res.e_noxfer[i], res.e_mapped[i], res.e_naive[i], res.reduction_mapped[i],
             res.reduction_naive[i]] for i, (s, t) in enumerate(res.pairs)]
    cells = Report("diff_ref", ("source", "target", "e_noxfer", "e_mapped", "e_naive",
                                "reduction_mapped_pct", "reduction_naive_pct"),
                   (str, str, float, float, float, float, float), rows)
    summary = Report("diff_ref_summary", ("metric", "value"), (str, float),
                     [["mean_reduction_mapped_pct", float(res.reduction_mapped.mean())],
                      ["mean_reduction_naive_pct", float(res.reduction_naive.mean())],
                      ["reference_hardware_pct", HARDWARE_DIFF_REF_REDUCTION]])
    return cells, summary


# --- relative degree -------------------------------------------------------------------

def relative_degree_report(model: StateSpaceModel, steps: int = 50, tol: float = 1e-9) -> Report:
    vrd = vector_relative_degree(model, tol)
    est = estimate_relative_degree_from_steps(step_experiments(model, steps), tol)
    mp = minimum_phase_check(model, vrd)
    zd = mp.zero_dynamics
    rho = float(np.max(np.abs(zd))) if zd.size else 0.0
    rows = [[i, int(vrd.r[i]), int(est.r[i]), *(float(v) for v in vrd.A0[i]),
             bool(est.full_rank), bool(mp.minimum_phase), rho] for i in range(model.p)]
    cols = (("channel", "r_analytic", "r_steps") + tuple(f"A0_{j}" for j in range(model.p))
            + ("steps_full_rank", "minimum_phase", "zero_dynamics_radius"))
    types = (int, int, int) + (float,) * model.p + (int, int, float)
    return Report("relative_degree", cols, types, rows)
