"""Multi-task transfer: linear maps from relative-degree-shifted desired outputs to inputs."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .lti import (StateSpaceModel, UndefinedRelativeDegreeError, VectorRelativeDegree,
                  minimum_phase_check, output_zeroing_gain, simulate, vector_relative_degree)


class MissingFeedbackError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"feedback source returned no sample at step {step}")
        self.step = step


class UnobservableError(ValueError):
    pass


def _r(r) -> tuple[int, ...]:
    return tuple(r.r) if isinstance(r, VectorRelativeDegree) else tuple(int(v) for v in r)


def shifted_desired(y_desired: np.ndarray, r: Sequence[int], a) -> np.ndarray:
    """Rows [y*_1(a + r_1), ..., y*_p(a + r_p)] for each index in ``a``."""
    a = np.atleast_1d(a)
    return np.column_stack([y_desired[a + ri, i] for i, ri in enumerate(r)])


def perfect_tracking_input(model: StateSpaceModel, vrd: VectorRelativeDegree, y_desired,
                           x0=None, N: int | None = None, check_phase: bool = True):
    """Inversion law u(k) = A0^-1 (y*(k + r) - [C_i A^{r_i}] x(k)).

    ``y_desired`` holds y*(0), y*(1), ...; returns (u(0..N-1), x(0..N)).
    """
    yd = np.asarray(y_desired, dtype=float).reshape(len(y_desired), -1)
    r = vrd.r
    if N is None:
        N = yd.shape[0] - max(r)
    if N < 0 or N + max(r) > yd.shape[0]:
        raise ValueError("desired trajectory too short for the requested horizon")
    if np.linalg.matrix_rank(vrd.A0) < model.p:
        raise UndefinedRelativeDegreeError("decoupling matrix is singular")
    if check_phase and not minimum_phase_check(model, vrd).minimum_phase:
        warnings.warn("model is not minimum phase; internal states may diverge", RuntimeWarning)
    Kx = np.linalg.solve(vrd.A0, output_zeroing_gain(model, vrd))
    Ky = np.linalg.inv(vrd.A0)
    ybar = shifted_desired(yd, r, np.arange(N)) if N else np.zeros((0, model.p))
    x = np.empty((N + 1, model.n))
    x[0] = np.zeros(model.n) if x0 is None else x0
    u = np.empty((N, model.p))
    A, B = model.A, model.B
    for k in range(N):
        u[k] = Ky @ ybar[k] - Kx @ x[k]
        x[k + 1] = A @ x[k] + B @ u[k]
    return u, x


def build_window_state(x_traj, y_desired, vrd) -> np.ndarray:
    """Rows a = 0..N_r of [x(a)^T, y*_1(a+r_1), ..., y*_p(a+r_p)], N = len(y_desired) - 1."""
    r = _r(vrd)
    x = np.asarray(x_traj, dtype=float)
    yd = np.asarray(y_desired, dtype=float).reshape(len(y_desired), -1)
    N = yd.shape[0] - 1
    Nr = N - max(r)
    if Nr < 0:
        raise ValueError("trajectory shorter than the largest relative degree")
    if x.shape[0] < Nr + 1:
        raise ValueError(f"need states x(0..{Nr}), got {x.shape[0]} samples")
    a = np.arange(Nr + 1)
    return np.hstack([x[: Nr + 1], shifted_desired(yd, r, a)])


def _past(arr: np.ndarray, a: int, nbar: int) -> np.ndarray:
    """[arr(a-1), ..., arr(a-nbar)] flattened, zeros before the start."""
    out = np.zeros((nbar, arr.shape[1]))
    for i in range(1, nbar + 1):
        if a - i >= 0:
            out[i - 1] = arr[a - i]
    return out.ravel()


def build_window_io(u, y, y_desired, vrd, nbar: int, start: int | None = None) -> np.ndarray:
    """Rows a = start..N_r of [u(a-1..a-nbar), y(a-1..a-nbar), y*(a + r)].

    ``y`` holds measured outputs y(0), y(1), ...; the default start is ``nbar``;
    smaller starts zero-pad the history (system at rest before k = 0).
    """
    r = _r(vrd)
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    yd = np.asarray(y_desired, dtype=float).reshape(len(y_desired), -1)
    N = yd.shape[0] - 1
    Nr = N - max(r)
    start = nbar if start is None else start
    if Nr < start:
        raise ValueError("trajectory too short for the window length")
    rows = [np.concatenate([_past(u, a, nbar), _past(y, a, nbar),
                            shifted_desired(yd, r, a)[0]]) for a in range(start, Nr + 1)]
    return np.array(rows)


@dataclass(frozen=True)
class TransferMap:
    variant: str  # "state" or "io"
    theta: np.ndarray  # column i is theta_i
    r: tuple[int, ...]
    nbar: int | None = None
    residual_norm: float = 0.0
    condition_number: float = 1.0
    rank: int = 0
    rank_deficient: bool = False
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in ("state", "io"):
            raise ValueError("variant must be 'state' or 'io'")
        th = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if not np.all(np.isfinite(th)):
            raise ValueError("theta must be finite")
        p = len(self.r)
        if th.shape[1] != p:
            raise ValueError("one parameter vector per channel required")
        if self.variant == "io" and th.shape[0] != 2 * p * (self.nbar or 0) + p:
            raise ValueError("io map needs 2 p nbar + p parameters per channel")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "r", tuple(int(v) for v in self.r))

    @property
    def p(self) -> int:
        return len(self.r)

    @property
    def n(self) -> int | None:
        return self.theta.shape[0] - self.p if self.variant == "state" else None

    def predict(self, W) -> np.ndarray:
        return np.asarray(W) @ self.theta

    def to_dict(self) -> dict:
        return {"variant": self.variant, "r": list(self.r), "nbar": self.nbar,
                "theta": self.theta.T.tolist(),
                "alignment": "theta applies to regressor rows a = 0..N_r",
                "diagnostics": {"residual_norm": self.residual_norm,
                                "condition_number": self.condition_number,
                                "rank": self.rank, "rank_deficient": self.rank_deficient,
                                **self.diagnostics}}

    @classmethod
    def from_dict(cls, d: dict) -> TransferMap:
        dg = dict(d.get("diagnostics", {}))
        core = {k: dg.pop(k) for k in ("residual_norm", "condition_number", "rank",
                                       "rank_deficient") if k in dg}
        return cls(d["variant"], np.array(d["theta"], dtype=float).T, tuple(d["r"]),
                   d.get("nbar"), diagnostics=dg, **core)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> TransferMap:
        return cls.from_dict(json.loads(Path(path).read_text()))


def nominal_inverse_theta(model: StateSpaceModel, vrd: VectorRelativeDegree) -> np.ndarray:
    """State-map parameters of the exact inversion law of ``model`` (columns theta_i)."""
    Ky = np.linalg.inv(vrd.A0)
    return np.hstack([-Ky @ output_zeroing_gain(model, vrd), Ky]).T


def fit_transfer_map(W, u_learned, vrd, variant: str = "state", nbar: int | None = None,
                     rcond: float = 1e-10, ridge: float = 0.0, prior=None) -> TransferMap:
    """Least-squares theta_i with W theta_i ~ u_i, truncating singular values below rcond * s_max.

    With ``prior`` the fit solves for the deviation theta - prior, so a ridge term
    (and the minimum-norm choice in unexcited directions) pulls toward the prior
    instead of toward zero.
    """
    W = np.asarray(W, dtype=float)
    U = np.asarray(u_learned, dtype=float)
    U = U.reshape(W.shape[0], -1)
    base = np.zeros((W.shape[1], U.shape[1])) if prior is None else np.asarray(prior, dtype=float)
    if base.shape != (W.shape[1], U.shape[1]):
        raise ValueError(f"prior must have shape {(W.shape[1], U.shape[1])}")
    target = U - W @ base
    if ridge > 0:
        Wa = np.vstack([W, np.sqrt(ridge) * np.eye(W.shape[1])])
        Ua = np.vstack([target, np.zeros((W.shape[1], U.shape[1]))])
    else:
        Wa, Ua = W, target
    delta = np.linalg.lstsq(Wa, Ua, rcond=rcond)[0]
    theta = base + delta
    resid = float(np.linalg.norm(W @ theta - U))
    sw = np.linalg.svd(W, compute_uv=False) if W.size else np.zeros(0)
    smin = sw[-1] if sw.size else 0.0
    cond = float(sw[0] / smin) if smin > 0 else np.inf
    rank_w = int(np.sum(sw > rcond * sw[0])) if sw.size and sw[0] > 0 else 0
    if W.shape[0] < W.shape[1]:
        warnings.warn("fewer regressor rows than parameters", RuntimeWarning)
    return TransferMap(variant, theta, _r(vrd), nbar, resid, cond, rank_w,
                       bool(rank_w < W.shape[1]), {"ridge": float(ridge),
                                                  "prior": prior is not None})


class FeedbackSource(Protocol):
    def state(self) -> np.ndarray | None: ...

    def output(self) -> np.ndarray | None: ...

    def push(self, u: np.ndarray) -> None: ...


class ModelFeedback:
    """Feeds back the state/output of a simulated LTI model driven by the emitted inputs."""

    def __init__(self, model: StateSpaceModel, x0=None):
        self.model = model
        self.x = np.zeros(model.n) if x0 is None else np.array(x0, dtype=float)
        self.states = [self.x.copy()]

    def state(self):
        return self.x

    def output(self):
        return self.model.C @ self.x

    def push(self, u):
        self.x = self.model.A @ self.x + self.model.B @ u
        self.states.append(self.x.copy())


def apply_transfer_map_online(tmap: TransferMap, y_desired_new, feedback: FeedbackSource,
                              N: int | None = None) -> np.ndarray:
    """Emit u(k) = [regressor row at k] theta for k = 0..N-1, querying feedback each step.

    ``y_desired_new`` holds y*(0), y*(1), ...; default N = len - max r.
    The io variant assumes rest before k = 0 (zero-padded history).
    """
    yd = np.asarray(y_desired_new, dtype=float).reshape(len(y_desired_new), -1)
    r = tmap.r
    if N is None:
        N = yd.shape[0] - max(r)
    ybar = shifted_desired(yd, r, np.arange(N)) if N else np.zeros((0, tmap.p))
    u = np.zeros((N, tmap.p))
    y_hist = np.zeros((N, tmap.p))
    for k in range(N):
        if tmap.variant == "state":
            x = feedback.state()
            if x is None:
                raise MissingFeedbackError(k)
            row = np.concatenate([np.asarray(x, dtype=float), ybar[k]])
        else:
            yk = feedback.output()
            if yk is None:
                raise MissingFeedbackError(k)
            y_hist[k] = yk
            row = np.concatenate([_past(u, k, tmap.nbar), _past(y_hist, k, tmap.nbar), ybar[k]])
        u[k] = row @ tmap.theta
        feedback.push(u[k])
    return u


@dataclass(frozen=True)
class StateReconstructor:
    M_u: np.ndarray
    M_y: np.ndarray
    nbar: int
    model: StateSpaceModel

    def reconstruct(self, u_past, y_past) -> np.ndarray:
        """x(k) from [u(k-1), ..., u(k-nbar)] and [y(k-1), ..., y(k-nbar)]."""
        return self.M_u @ np.ravel(u_past) + self.M_y @ np.ravel(y_past)

    def reconstruct_at(self, u, y, k: int) -> np.ndarray:
        """x(k) from sequences u(0..), y(0..) with k >= nbar."""
        if k < self.nbar:
            raise ValueError("need at least nbar past samples")
        return self.reconstruct(u[k - self.nbar:k][::-1], y[k - self.nbar:k][::-1])


def observability_matrix(model: StateSpaceModel, nbar: int) -> np.ndarray:
    """[C A^{nbar-1}; ...; C A; C]."""
    return np.vstack([model.C @ np.linalg.matrix_power(model.A, k) for k in range(nbar - 1, -1, -1)])


def state_reconstructor(model: StateSpaceModel, nbar: int | None = None) -> StateReconstructor:
    nbar = model.n if nbar is None else int(nbar)
    n, p = model.n, model.p
    A, B, C = model.A, model.B, model.C
    V = observability_matrix(model, nbar)
    if np.linalg.matrix_rank(V) < n:
        raise UnobservableError(f"observability matrix over {nbar} samples has rank < {n}")
    U = np.hstack([np.linalg.matrix_power(A, i) @ B for i in range(nbar)])
    T = np.zeros((nbar * p, nbar * p))
    for j in range(nbar):
        for i in range(j + 1, nbar):
            T[j * p:(j + 1) * p, i * p:(i + 1) * p] = C @ np.linalg.matrix_power(A, i - j - 1) @ B
    Vp = np.linalg.solve(V.T @ V, V.T)
    M_y = np.linalg.matrix_power(A, nbar) @ Vp
    M_u = U - M_y @ T
    return StateReconstructor(M_u, M_y, nbar, model)


def map_between_reference_models(u_learned, ref_source: StateSpaceModel,
                                 ref_target: StateSpaceModel,
                                 vrd_target: VectorRelativeDegree | None = None) -> np.ndarray:
    """Input making the target reference reproduce the source reference's output under u_learned."""
    u = np.asarray(u_learned, dtype=float).reshape(-1, ref_source.p)
    N = u.shape[0]
    vrd = vrd_target or vector_relative_degree(ref_target)
    y_src = simulate(ref_source, u).y
    y0 = ref_source.C @ np.zeros(ref_source.n)
    tail = max(vrd.r) - 1
    yd = np.vstack([y0, y_src] + ([np.repeat(y_src[-1:], tail, axis=0)] if tail > 0 else []))
    u_t, _ = perfect_tracking_input(ref_target, vrd, yd, N=N)
    return u_t
