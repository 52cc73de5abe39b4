"""Optimization-based ILC in the lifted domain.

The trial model is  y~_j = F u_j + d,  with y~ the lifted tracking error over
samples 1..N and u the lifted input over samples 0..N-1. An iteration-domain
Kalman filter estimates d; the next input minimizes the predicted error plus
input effort, optionally under linear input/output constraints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve

from .lti import LiftedModel
from .plant import tracking_error
from .qp import QPInfeasibleError, QPSolverError, solve_qp


class IlcInfeasibleError(QPInfeasibleError):
    pass


@dataclass(frozen=True)
class KalmanConfig:
    P0: float = 1.0
    q_proc: float = 1e-4
    q_meas: float = 1e-2

    def __post_init__(self):
        if not self.q_meas > 0:
            raise ValueError("q_meas must be positive")
        if self.q_proc < 0 or not self.P0 > 0:
            raise ValueError("need q_proc >= 0 and P0 > 0")


@dataclass(frozen=True)
class Constraints:
    """S_c y <= y_max and Z_c u <= u_max on lifted signals.

    ``mode="absolute"`` applies the output rows to y~ + y* (physical positions);
    ``mode="deviation"`` applies them to the error y~ directly.
    """

    S_c: np.ndarray | None = None
    y_max: np.ndarray | None = None
    Z_c: np.ndarray | None = None
    u_max: np.ndarray | None = None
    mode: str = "absolute"

    def __post_init__(self):
        if self.mode not in ("absolute", "deviation"):
            raise ValueError("mode must be 'absolute' or 'deviation'")
        for M, b, name in ((self.S_c, self.y_max, "S_c"), (self.Z_c, self.u_max, "Z_c")):
            if (M is None) != (b is None):
                raise ValueError(f"{name} and its bound must be given together")
            if M is not None and np.atleast_2d(M).shape[0] != np.size(b):
                raise ValueError(f"{name} rows do not match its bound")

    @classmethod
    def box(cls, n: int, u_max: float | np.ndarray, u_min=None) -> Constraints:
        u_max = np.broadcast_to(np.asarray(u_max, dtype=float), (n,))
        u_min = -u_max if u_min is None else np.broadcast_to(np.asarray(u_min, dtype=float), (n,))
        return cls(Z_c=np.vstack([np.eye(n), -np.eye(n)]), u_max=np.concatenate([u_max, -u_min]))


@dataclass(frozen=True)
class IlcConfig:
    """Weights are scalars (multiples of identity) or full matrices.

    The input weight actually used is ``R + R_diff * D^T D`` with D the
    per-channel first difference u(k) - u(k-1) (u(-1) = 0), which penalizes
    sample-to-sample input changes without biasing the low-frequency solution.
    """

    Q: float | np.ndarray = 1.0
    R: float | np.ndarray = 1e-4
    R_diff: float = 0.1
    constraints: Constraints | None = None
    kalman: KalmanConfig = field(default_factory=KalmanConfig)

    def __post_init__(self):
        if not self.R_diff >= 0:
            raise ValueError("R_diff must be nonnegative")
        for name, strict in (("Q", False), ("R", True)):
            W = np.asarray(getattr(self, name), dtype=float)
            if W.ndim == 0:
                ok = W > 0 if strict else W >= 0
            else:
                ev = np.linalg.eigvalsh((W + W.T) / 2)
                ok = ev.min() > 0 if strict else ev.min() >= -1e-12 * max(1.0, ev.max())
            if not ok:
                raise ValueError(f"{name} must be positive {'definite' if strict else 'semi-definite'}")

    def to_dict(self) -> dict:
        def enc(W):
            W = np.asarray(W)
            return float(W) if W.ndim == 0 else W.tolist()
        return {"Q": enc(self.Q), "R": enc(self.R), "R_diff": float(self.R_diff),
                "kalman": {"P0": self.kalman.P0, "q_proc": self.kalman.q_proc,
                           "q_meas": self.kalman.q_meas}}

    @classmethod
    def from_dict(cls, d: dict) -> IlcConfig:
        k = d.get("kalman", {})
        return cls(Q=d.get("Q", 1.0), R=d.get("R", 1e-4), R_diff=float(d.get("R_diff", 0.1)),
                   kalman=KalmanConfig(**k))


@dataclass(frozen=True)
class IlcState:
    d_hat: np.ndarray
    P: np.ndarray
    j: int = 0

    @classmethod
    def initial(cls, size: int, cfg: IlcConfig, d_hat=None) -> IlcState:
        d = np.zeros(size) if d_hat is None else np.asarray(d_hat, dtype=float)
        return cls(d, cfg.kalman.P0 * np.eye(size), 0)


def _weight(W, size):
    W = np.asarray(W, dtype=float)
    return W * np.eye(size) if W.ndim == 0 else W


def input_weight(cfg: IlcConfig, size: int, p: int | None = None) -> np.ndarray:
    """R + R_diff D^T D for a lifted input of ``size`` entries stacked sample by sample."""
    R = _weight(cfg.R, size)
    if cfg.R_diff == 0:
        return R
    if p is None:
        raise ValueError("channel count needed for the input-difference penalty")
    if size % p:
        raise ValueError("lifted input size is not a multiple of the channel count")
    # D^T D for one channel is tridiagonal [-1, 2, -1] with a 1 in the last corner
    n = size // p
    main = np.full(n, 2.0)
    main[-1] = 1.0
    DtD = np.diag(main) - np.eye(n, k=1) - np.eye(n, k=-1)
    return R + cfg.R_diff * np.kron(DtD, np.eye(p))


_normal_cache: dict = {}


def _normal_factor(F: np.ndarray, cfg: IlcConfig, p: int | None):
    """Cholesky factor of F^T Q F + R_total, cached per (F, cfg, p)."""
    key = (id(F), id(cfg), p)
    hit = _normal_cache.get(key)
    if hit is not None and hit[0] is F and hit[1] is cfg:
        return hit[2], hit[3]
    size = F.shape[1]
    QF = _weight(cfg.Q, F.shape[0]) @ F
    Hm = F.T @ QF + input_weight(cfg, size, p)
    Hm = (Hm + Hm.T) / 2
    fac = cho_factor(Hm)
    if len(_normal_cache) > 8:
        _normal_cache.clear()
    _normal_cache[key] = (F, cfg, fac, Hm)
    return fac, Hm


def _F(F) -> np.ndarray:
    return F.F if isinstance(F, LiftedModel) else np.asarray(F, dtype=float)


def _channels(F, y_desired=None) -> int | None:
    if isinstance(F, LiftedModel):
        return F.p
    if y_desired is not None and np.ndim(y_desired) == 2:
        return int(np.shape(y_desired)[1])
    return None


def kalman_update(state: IlcState, cfg: IlcConfig, F, u_applied, y_measured) -> IlcState:
    """Random-walk disturbance model: d_{j+1} = d_j + w,  y~_j = F u_j + d_j + v."""
    Fm = _F(F)
    u = np.ravel(u_applied)
    y = np.ravel(y_measured)
    if u.size != Fm.shape[1] or y.size != Fm.shape[0] or state.d_hat.size != Fm.shape[0]:
        raise ValueError("dimensions inconsistent with the lifted model")
    kc = cfg.kalman
    size = y.size
    nu = y - Fm @ u - state.d_hat
    P = state.P + kc.q_proc * np.eye(size)
    S = P + kc.q_meas * np.eye(size)
    # K = P S^-1; P and S commute and are symmetric, so K = S^-1 P
    K = solve(S, P, assume_a="pos")
    d_hat = state.d_hat + K @ nu
    P_new = P - K @ P
    P_new = (P_new + P_new.T) / 2
    return IlcState(d_hat, P_new, state.j + 1)


def constraint_system(cfg: IlcConfig, Fm: np.ndarray, d_hat: np.ndarray, y_desired=None):
    """Stack the active constraints as G u <= h."""
    con = cfg.constraints
    if con is None:
        return None, None
    Gs, hs = [], []
    if con.S_c is not None:
        S = np.atleast_2d(np.asarray(con.S_c, dtype=float))
        offset = d_hat.copy()
        if con.mode == "absolute":
            if y_desired is None:
                raise ValueError("absolute output constraints need the desired trajectory")
            offset = offset + np.ravel(y_desired)
        Gs.append(S @ Fm)
        hs.append(np.ravel(con.y_max) - S @ offset)
    if con.Z_c is not None:
        Gs.append(np.atleast_2d(np.asarray(con.Z_c, dtype=float)))
        hs.append(np.ravel(con.u_max).astype(float))
    return np.vstack(Gs), np.concatenate(hs)


@dataclass(frozen=True)
class IlcUpdate:
    u: np.ndarray
    active: int


def ilc_step(state: IlcState, cfg: IlcConfig, F, y_desired=None, p: int | None = None
             ) -> IlcUpdate:
    """``p`` (channel count) is taken from a LiftedModel or a 2-D ``y_desired`` when omitted."""
    Fm = _F(F)
    fac, Hm = _normal_factor(Fm, cfg, p or _channels(F, y_desired))
    c = Fm.T @ (_weight(cfg.Q, Fm.shape[0]) @ state.d_hat)
    G, h = constraint_system(cfg, Fm, state.d_hat, y_desired)
    if G is None:
        return IlcUpdate(-cho_solve(fac, c), 0)
    try:
        res = solve_qp(Hm, c, G, h, factor=fac)
    except QPInfeasibleError as exc:
        raise IlcInfeasibleError(exc.rows, exc.violation) from None
    return IlcUpdate(res.x, int(res.active.size))


def ilc_update(state: IlcState, cfg: IlcConfig, F, y_desired=None, p: int | None = None
               ) -> np.ndarray:
    """Next lifted input minimizing (F u + d)^T Q (F u + d) + u^T R_total u under the constraints."""
    return ilc_step(state, cfg, F, y_desired, p).u


def init_from_transfer(u_transfer, F, cfg: IlcConfig | None = None) -> IlcState:
    """Disturbance estimate for which the predicted error under ``u_transfer`` is zero."""
    cfg = cfg or IlcConfig()
    Fm = _F(F)
    return IlcState.initial(Fm.shape[0], cfg, -(Fm @ np.ravel(u_transfer)))


@dataclass
class IterationRecord:
    iteration: int
    u: np.ndarray
    y: np.ndarray
    error: float
    max_input: float
    active: int


@dataclass
class LearningRecord:
    iterations: list[IterationRecord] = field(default_factory=list)
    state: IlcState | None = None
    fault: Exception | None = None

    @property
    def errors(self) -> np.ndarray:
        return np.array([it.error for it in self.iterations])

    def __len__(self):
        return len(self.iterations)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            write_record_rows(fh, self)


def write_record_rows(fh, record: LearningRecord, header_comment: str | None = None) -> None:
    if header_comment:
        for line in header_comment.splitlines():
            fh.write(f"# {line}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["iteration", "error", "max_input", "constraint_active"])
    for it in record.iterations:
        w.writerow([it.iteration, repr(it.error), repr(it.max_input), it.active])


def run_ilc(rollout: Callable[[np.ndarray], np.ndarray], F, cfg: IlcConfig, y_desired,
            iterations: int, warm_start=None, raise_faults: bool = False) -> LearningRecord:
    """Iterate rollout -> Kalman update -> input update.

    ``rollout`` maps an (N, p) input to the measured (N, p) output y(1..N);
    ``y_desired`` holds y*(1..N). Without a warm start the first input is the
    update from a zero disturbance estimate, i.e. zero.
    """
    Fm = _F(F)
    yd = np.asarray(y_desired, dtype=float)
    p = yd.shape[1] if yd.ndim == 2 else 1
    yd = yd.reshape(-1, p)
    record = LearningRecord()
    if iterations <= 0:
        return record
    state = (init_from_transfer(warm_start, Fm, cfg) if warm_start is not None
             else IlcState.initial(Fm.shape[0], cfg))
    record.state = state
    try:
        upd = ilc_step(state, cfg, Fm, yd, p)
        for j in range(1, iterations + 1):
            u = upd.u.reshape(-1, p)
            y = np.asarray(rollout(u), dtype=float).reshape(-1, p)
            err = tracking_error(yd, y)
            record.iterations.append(IterationRecord(j, u, y, err, float(np.max(np.abs(u))),
                                                     upd.active))
            state = kalman_update(state, cfg, Fm, u, y - yd)
            record.state = state
            if j < iterations:
                upd = ilc_step(state, cfg, Fm, yd, p)
    except (QPSolverError, QPInfeasibleError, RuntimeError, ValueError) as exc:
        if raise_faults:
            raise
        record.fault = exc
    return record
