"""Discrete-time LTI MIMO systems: simulation, lifting, relative degree, zero dynamics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm, null_space


class DimensionError(ValueError):
    """Array shapes do not agree with the model."""


class UndefinedRelativeDegreeError(ValueError):
    """No vector relative degree exists (a row of Markov parameters vanishes or A0 is singular)."""


class UndetectableDegreeError(ValueError):
    """An output channel never responded in a step experiment."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpaceModel:
    """x(k+1) = A x(k) + B u(k),  y(k) = C x(k), square (p inputs, p outputs)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    dt: float = 1.0
    input_labels: tuple[str, ...] = ()
    output_labels: tuple[str, ...] = ()

    def __post_init__(self):
        A = _frozen(np.atleast_2d(self.A))
        B = np.array(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        C = np.atleast_2d(np.array(self.C, dtype=float))
        B = _frozen(B)
        C = _frozen(C)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != n or C.shape[1] != n:
            raise DimensionError(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape}")
        p = B.shape[1]
        if C.shape[0] != p:
            raise DimensionError(f"system must be square: {p} inputs but {C.shape[0]} outputs")
        if p > n:
            raise DimensionError(f"need n >= p, got n={n}, p={p}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if np.linalg.matrix_rank(B) < p or np.linalg.matrix_rank(C) < p:
            raise ValueError("B and C must have full rank p")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "dt", float(self.dt))
        inl = tuple(self.input_labels) or tuple(f"u{i}" for i in range(p))
        outl = tuple(self.output_labels) or tuple(f"y{i}" for i in range(p))
        if len(inl) != p or len(outl) != p:
            raise DimensionError("one label per channel required")
        object.__setattr__(self, "input_labels", inl)
        object.__setattr__(self, "output_labels", outl)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    def transform(self, T: np.ndarray) -> StateSpaceModel:
        """Realization in coordinates z = T x."""
        Ti = np.linalg.inv(T)
        return StateSpaceModel(T @ self.A @ Ti, T @ self.B, self.C @ Ti, self.dt,
                               self.input_labels, self.output_labels)

    def markov(self, k: int) -> np.ndarray:
        """C A^k B."""
        return self.C @ np.linalg.matrix_power(self.A, k) @ self.B

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "dt": self.dt,
            "input_labels": list(self.input_labels),
            "output_labels": list(self.output_labels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> StateSpaceModel:
        return cls(np.array(d["A"], dtype=float), np.array(d["B"], dtype=float),
                   np.array(d["C"], dtype=float), float(d["dt"]),
                   tuple(d.get("input_labels", ())), tuple(d.get("output_labels", ())))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> StateSpaceModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class VectorRelativeDegree:
    r: tuple[int, ...]
    A0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(int(ri) for ri in self.r))
        object.__setattr__(self, "A0", _frozen(np.atleast_2d(self.A0)))
        if any(ri < 1 for ri in self.r):
            raise ValueError(f"relative degrees must be positive, got {self.r}")
        if self.A0.shape != (len(self.r), len(self.r)):
            raise DimensionError("A0 must be p x p")

    @property
    def total(self) -> int:
        return sum(self.r)

    @property
    def max(self) -> int:
        return max(self.r)


@dataclass(frozen=True)
class LiftedModel:
    """Trial map from u(0..N-1) to y(1..N), both stacked sample-major."""

    F: np.ndarray
    N: int
    p: int
    dt: float

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.F @ np.ravel(u)


@dataclass(frozen=True)
class SimulationResult:
    y: np.ndarray  # y(1..N), shape (N, p)
    x: np.ndarray  # x(0..N), shape (N+1, n)


@dataclass(frozen=True)
class StepExperiment:
    """Response to a step of ``magnitude`` on ``channel`` applied at k=0 from x(0)=0; y(0..K)."""

    channel: int
    magnitude: float
    y: np.ndarray
    dt: float = 1.0


@dataclass(frozen=True)
class StepEstimate:
    r: tuple[int, ...]
    Y_r: np.ndarray
    A0: np.ndarray
    full_rank: bool

    @property
    def total(self) -> int:
        return sum(self.r)

    def to_vrd(self) -> VectorRelativeDegree:
        if not self.full_rank:
            raise UndefinedRelativeDegreeError("Y_r is rank deficient")
        return VectorRelativeDegree(self.r, self.A0)


@dataclass(frozen=True)
class MinimumPhaseResult:
    minimum_phase: bool
    zero_dynamics: np.ndarray  # eigenvalues of the n - r dimensional zero dynamics
    closed_loop: np.ndarray = field(repr=False)  # all eigenvalues of A - B A0^-1 [C_i A^r_i]


def simulate(model: StateSpaceModel, u, x0=None) -> SimulationResult:
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None] if model.p == 1 else u.reshape(-1, model.p)
    if u.ndim != 2 or u.shape[1] != model.p:
        raise DimensionError(f"input must have {model.p} channels, got shape {u.shape}")
    x0 = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (model.n,):
        raise DimensionError(f"x0 must have shape ({model.n},), got {x0.shape}")
    N = u.shape[0]
    x = np.empty((N + 1, model.n))
    x[0] = x0
    A, B = model.A, model.B
    for k in range(N):
        x[k + 1] = A @ x[k] + B @ u[k]
    return SimulationResult(y=x[1:] @ model.C.T, x=x)


def _is_zero(block: np.ndarray, model: StateSpaceModel, k: int, tol: float) -> bool:
    scale = np.linalg.norm(model.C, 2) * np.linalg.norm(model.A, 2) ** k * np.linalg.norm(model.B, 2)
    return bool(np.max(np.abs(block)) <= tol * scale)


def _is_singular(M: np.ndarray, tol: float) -> bool:
    s = np.linalg.svd(M, compute_uv=False)
    return bool(s[0] == 0 or s[-1] <= max(tol, 1e-13) * s[0])


def vector_relative_degree(model: StateSpaceModel, tol: float = 1e-9) -> VectorRelativeDegree:
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    n, p = model.n, model.p
    r = [0] * p
    A0 = np.zeros((p, p))
    Ak = np.eye(n)
    for k in range(n):
        row_blocks = model.C @ Ak @ model.B
        for i in range(p):
            if r[i] == 0 and not _is_zero(row_blocks[i], model, k, tol):
                r[i] = k + 1
                A0[i] = row_blocks[i]
        if all(r):
            break
        Ak = Ak @ model.A
    if not all(r):
        missing = [i for i in range(p) if r[i] == 0]
        raise UndefinedRelativeDegreeError(f"outputs {missing} are not affected by any input")
    if _is_singular(A0, tol):
        raise UndefinedRelativeDegreeError(f"decoupling matrix is singular for r={tuple(r)}")
    return VectorRelativeDegree(tuple(r), A0)


def step_experiments(model: StateSpaceModel, K: int, magnitudes: Sequence[float] | None = None
                     ) -> list[StepExperiment]:
    """Run one step experiment per input channel from rest, K+1 output samples each."""
    mags = np.ones(model.p) if magnitudes is None else np.asarray(magnitudes, dtype=float)
    records = []
    for j in range(model.p):
        u = np.zeros((K, model.p))
        u[:, j] = mags[j]
        y = np.vstack([np.zeros(model.p), simulate(model, u).y])
        records.append(StepExperiment(j, float(mags[j]), y, model.dt))
    return records


def estimate_relative_degree_from_steps(records: Sequence[StepExperiment], tol: float = 1e-9
                                        ) -> StepEstimate:
    """Relative degree from p single-channel step experiments.

    r_i is the earliest sample, over all experiments, at which output i leaves zero
    (|y_i| above ``tol`` times the largest |y_i| seen in any experiment).
    """
    records = sorted(records, key=lambda rec: rec.channel)
    p = len(records)
    if [rec.channel for rec in records] != list(range(p)):
        raise ValueError("need exactly one experiment per input channel")
    if len({rec.dt for rec in records}) != 1:
        raise ValueError("experiments must share dt")
    ys = [np.asarray(rec.y, dtype=float) for rec in records]
    if any(y.ndim != 2 or y.shape[1] != p for y in ys):
        raise DimensionError(f"each record needs {p} output channels")
    r = []
    for i in range(p):
        peak = max(np.max(np.abs(y[:, i])) for y in ys)
        if peak == 0:
            raise UndetectableDegreeError(f"output {i} never responds")
        thresh = tol * peak
        first = [np.flatnonzero(np.abs(y[1:, i]) > thresh) for y in ys]
        delays = [int(f[0]) + 1 for f in first if f.size]
        r.append(min(delays))
    Y_r = np.array([[ys[j][r[i], i] for j in range(p)] for i in range(p)])
    mags = np.array([rec.magnitude for rec in records])
    A0 = Y_r / mags[None, :]
    return StepEstimate(tuple(r), Y_r, A0, not _is_singular(Y_r, tol))


def markov_parameters(model: StateSpaceModel, N: int) -> np.ndarray:
    """C A^k B for k = 0..N-1, shape (N, p, p)."""
    out = np.empty((N, model.p, model.p))
    AkB = model.B.copy()
    for k in range(N):
        out[k] = model.C @ AkB
        AkB = model.A @ AkB
    return out


def lifted_representation(model: StateSpaceModel, N: int) -> LiftedModel:
    if N < 1:
        raise ValueError("horizon must be at least one sample")
    p = model.p
    G = markov_parameters(model, N)
    lag = np.subtract.outer(np.arange(N), np.arange(N))
    blocks = G[np.clip(lag, 0, None)] * (lag >= 0)[:, :, None, None]
    F = blocks.transpose(0, 2, 1, 3).reshape(N * p, N * p)
    F.setflags(write=False)
    return LiftedModel(F, N, p, model.dt)


def output_zeroing_gain(model: StateSpaceModel, vrd: VectorRelativeDegree) -> np.ndarray:
    """Stack of C_i A^{r_i}, the state part of the r-step-ahead output prediction."""
    return np.vstack([model.C[i] @ np.linalg.matrix_power(model.A, ri)
                      for i, ri in enumerate(vrd.r)])


def minimum_phase_check(model: StateSpaceModel, vrd: VectorRelativeDegree,
                        tol: float = 1e-6) -> MinimumPhaseResult:
    if _is_singular(vrd.A0, 1e-12):
        raise UndefinedRelativeDegreeError("decoupling matrix is singular")
    Cr = output_zeroing_gain(model, vrd)
    Az = model.A - model.B @ np.linalg.solve(vrd.A0, Cr)
    closed = np.linalg.eigvals(Az)
    # zero-dynamics subspace: C_i A^k x = 0 for k < r_i; invariant under Az
    O = np.vstack([model.C[i] @ np.linalg.matrix_power(model.A, k)
                   for i, ri in enumerate(vrd.r) for k in range(ri)])
    Z = null_space(O)
    if Z.shape[1] == 0:
        zd = np.zeros(0, dtype=complex)
    else:
        zd = np.linalg.eigvals(Z.T @ Az @ Z)
    ok = bool(np.all(np.abs(zd) < 1 - tol))
    return MinimumPhaseResult(ok, zd, closed)


def _positive(name: str, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if np.any(~(v > 0)):
        raise ValueError(f"{name} must be positive, got {v}")
    return v


def zoh(Ac: np.ndarray, Bc: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    n, m = Bc.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    E = expm(M * dt)
    return E[:n, :n], E[:n, n:]


def discretize_reference(K, m, dt: float, axes: int = 3,
                         labels: Sequence[str] = ("x", "y", "z"),
                         method: str = "zoh") -> StateSpaceModel:
    """Discrete realization of diag(K_i m_i / (s^2 + m_i s + K_i m_i)); state per axis is (pos, vel).

    ``method="zoh"`` is exact under held inputs (relative degree 1 per axis, with a
    sampling zero near -1). ``method="euler"`` uses A = I + dt Ac, B = dt Bc, which
    keeps the continuous relative degree 2 and has no zero dynamics.
    """
    if method not in ("zoh", "euler"):
        raise ValueError("method must be 'zoh' or 'euler'")
    dt = float(_positive("dt", dt))
    K = np.broadcast_to(_positive("K", K), (axes,))
    m = np.broadcast_to(_positive("m", m), (axes,))
    n = 2 * axes
    Ac = np.zeros((n, n))
    Bc = np.zeros((n, axes))
    C = np.zeros((axes, n))
    for i in range(axes):
        s = slice(2 * i, 2 * i + 2)
        Ac[s, s] = [[0.0, 1.0], [-K[i] * m[i], -m[i]]]
        Bc[2 * i + 1, i] = K[i] * m[i]
        C[i, 2 * i] = 1.0
    if method == "zoh":
        Ad, Bd = zoh(Ac, Bc, dt)
    else:
        Ad, Bd = np.eye(n) + dt * Ac, dt * Bc
    lab = tuple(labels)[:axes] if len(labels) >= axes else ()
    return StateSpaceModel(Ad, Bd, C, dt, lab, lab)
