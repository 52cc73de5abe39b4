"""Extended L1 adaptive output-feedback controller (velocity inner loop, proportional position loop)."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .lti import StateSpaceModel


class ControllerFault(RuntimeError):
    """A measurement fed to the controller was not finite."""


def _axis(v, axes: int) -> np.ndarray:
    a = np.array(np.broadcast_to(np.asarray(v, dtype=float), (axes,)))
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class L1Config:
    m: np.ndarray = 5.0
    omega: np.ndarray = 30.0
    kp: np.ndarray = 2.0
    gamma: float = 50.0
    sigma_max: np.ndarray = 10.0
    eps_proj: float = 0.1
    lipschitz: float = 1.0
    dt_ctrl: float = 0.01
    axes: int = 3

    def __post_init__(self):
        for name in ("m", "omega", "kp", "sigma_max"):
            object.__setattr__(self, name, _axis(getattr(self, name), self.axes))
        for name in ("m", "omega", "kp", "sigma_max", "gamma", "eps_proj", "dt_ctrl"):
            if np.any(~(np.asarray(getattr(self, name)) > 0)):
                raise ValueError(f"L1Config.{name} must be positive")
        if self.lipschitz < 0:
            raise ValueError("L1Config.lipschitz must be nonnegative")
        # discrete error dynamics of predictor + Euler adaptation are stable iff
        # dt*gamma*(1 - a_m) < 2*(1 + a_m)
        a_m = np.exp(-self.m * self.dt_ctrl)
        if np.any(self.dt_ctrl * self.gamma * (1 - a_m) >= 2 * (1 + a_m)):
            raise ValueError("dt_ctrl * gamma too large: discrete adaptation loop unstable")

    @property
    def a_m(self) -> np.ndarray:
        return np.exp(-self.m * self.dt_ctrl)

    @property
    def a_v(self) -> np.ndarray:
        return np.exp(-self.omega * self.dt_ctrl)

    def with_(self, **kw) -> L1Config:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return L1Config(**d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict, axes: int = 3) -> L1Config:
        keys = {"m": "m", "omega": "omega", "kp": "kp", "gamma": "gamma",
                "sigma_max": "sigma_max", "eps_proj": "eps_proj",
                "lipschitz": "lipschitz", "dt_ctrl": "dt_ctrl"}
        unknown = set(d) - set(keys) - {"axes"}
        if unknown:
            raise ValueError(f"unknown L1 config keys: {sorted(unknown)}")
        kw = {keys[k]: v for k, v in d.items() if k in keys}
        return cls(axes=int(d.get("axes", axes)), **kw)


@dataclass
class L1State:
    yhat1: np.ndarray
    sigma_hat: np.ndarray
    v_state: np.ndarray
    u_l1: np.ndarray = field(default=None)

    @classmethod
    def zeros(cls, axes: int = 3) -> L1State:
        return cls(np.zeros(axes), np.zeros(axes), np.zeros(axes), np.zeros(axes))


def projection_f(lam, lam_max, eps):
    lam = np.asarray(lam, dtype=float)
    return ((eps + 1) * lam @ lam - lam_max**2) / (eps * lam_max**2)


def projection(lam, y, lam_max: float, eps: float) -> np.ndarray:
    """Smooth projection operator keeping ``lam`` inside {f(lam) <= 1}."""
    if not (lam_max > 0 and eps > 0):
        raise ValueError("lam_max and eps must be positive")
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    f = projection_f(lam, lam_max, eps)
    if f < 0:
        return y.copy()
    grad = 2 * (eps + 1) * lam / (eps * lam_max**2)
    gy = grad @ y
    if gy <= 0:
        return y.copy()
    gg = grad @ grad
    assert gg > 0, "gradient vanishes only at lam = 0 where f < 0"
    return y - grad * (gy / gg) * f


def _axis_projection(lam, y, lam_max, eps):
    """Scalar projection applied independently per axis (vectorized)."""
    f = ((eps + 1) * lam * lam - lam_max**2) / (eps * lam_max**2)
    outward = (f >= 0) & (lam * y > 0)
    # for a scalar, grad grad^T y / |grad|^2 = y
    return np.where(outward, y * (1 - f), y)


def l1_step(state: L1State, cfg: L1Config, u2, y1, y2) -> tuple[np.ndarray, L1State]:
    """One controller sample. Mutates and returns ``state``.

    Order: read measurements, update adaptation, compute control, advance predictor.
    """
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y2))):
        raise ControllerFault("non-finite measurement")
    u1 = cfg.kp * (np.asarray(u2, dtype=float) - y2)
    ytilde = state.yhat1 - y1
    sigma = state.sigma_hat + cfg.dt_ctrl * cfg.gamma * _axis_projection(
        state.sigma_hat, -ytilde, cfg.sigma_max, cfg.eps_proj)
    # the Euler step can leave {f <= 1} (|sigma| <= sigma_max) when the bound is tight;
    # past the surface the restoring factor (1 - f) is unbounded, so clamp back onto it
    state.sigma_hat = np.clip(sigma, -cfg.sigma_max, cfg.sigma_max)
    a_v = cfg.a_v
    state.v_state = a_v * state.v_state + (1 - a_v) * (u1 - state.sigma_hat)
    u = state.v_state
    a_m = cfg.a_m
    state.yhat1 = a_m * state.yhat1 + (1 - a_m) * (u + state.sigma_hat)
    state.u_l1 = u
    return u, state


class L1Controller:
    """Stateful wrapper around :func:`l1_step` for one rollout."""

    def __init__(self, cfg: L1Config):
        self.cfg = cfg
        self.state = L1State.zeros(cfg.axes)

    def reset(self):
        self.state = L1State.zeros(self.cfg.axes)

    def __call__(self, u2, y1, y2) -> np.ndarray:
        u, _ = l1_step(self.state, self.cfg, u2, y1, y2)
        return u


# --- L1-norm condition ------------------------------------------------------

@dataclass(frozen=True)
class SisoSS:
    """Discrete SISO realization x+ = A x + B u, y = C x + D u."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float

    @classmethod
    def make(cls, A, B, C, D=0.0) -> SisoSS:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0] if A.size else 0
        return cls(A.reshape(n, n), np.asarray(B, dtype=float).reshape(n),
                   np.asarray(C, dtype=float).reshape(n), float(D))

    @classmethod
    def gain(cls, k: float) -> SisoSS:
        return cls.make(np.zeros((0, 0)), np.zeros(0), np.zeros(0), k)

    @property
    def n(self) -> int:
        return self.B.size

    def then(self, other: SisoSS) -> SisoSS:
        """Series connection: ``other`` driven by the output of ``self``."""
        n1, n2 = self.n, other.n
        A = np.zeros((n1 + n2, n1 + n2))
        A[:n1, :n1] = self.A
        A[n1:, :n1] = np.outer(other.B, self.C)
        A[n1:, n1:] = other.A
        return SisoSS.make(A, np.concatenate([self.B, other.B * self.D]),
                           np.concatenate([other.D * self.C, other.C]), other.D * self.D)

    def __add__(self, other: SisoSS) -> SisoSS:
        n1, n2 = self.n, other.n
        A = np.zeros((n1 + n2, n1 + n2))
        A[:n1, :n1] = self.A
        A[n1:, n1:] = other.A
        return SisoSS.make(A, np.concatenate([self.B, other.B]),
                           np.concatenate([self.C, other.C]), self.D + other.D)

    def scale(self, k: float) -> SisoSS:
        return SisoSS.make(self.A, self.B, k * self.C, k * self.D)

    def inverse(self) -> SisoSS:
        if abs(self.D) < 1e-14:
            raise ValueError("inverse of a strictly proper system is not causal")
        Di = 1.0 / self.D
        return SisoSS.make(self.A - Di * np.outer(self.B, self.C), Di * self.B,
                           -Di * self.C, Di)

    def feedback(self, other: SisoSS) -> SisoSS:
        """Negative feedback loop with ``self`` (strictly proper) forward and ``other`` back."""
        if abs(self.D) > 0:
            raise ValueError("forward path must be strictly proper")
        n1, n2 = self.n, other.n
        A = np.zeros((n1 + n2, n1 + n2))
        A[:n1, :n1] = self.A - other.D * np.outer(self.B, self.C)
        A[:n1, n1:] = -np.outer(self.B, other.C)
        A[n1:, :n1] = np.outer(other.B, self.C)
        A[n1:, n1:] = other.A
        return SisoSS.make(A, np.concatenate([self.B, np.zeros(n2)]),
                           np.concatenate([self.C, np.zeros(n2)]), 0.0)

    def impulse(self, steps: int) -> np.ndarray:
        g = np.empty(steps)
        if steps:
            g[0] = self.D
        x = self.B.copy()
        for k in range(1, steps):
            g[k] = self.C @ x
            x = self.A @ x
        return g

    def frequency_response(self, z) -> np.ndarray:
        z = np.atleast_1d(z)
        if not self.n:
            return np.full(z.shape, self.D, dtype=complex)
        eye = np.eye(self.n)
        return np.array([self.C @ np.linalg.solve(zk * eye - self.A, self.B) + self.D
                         for zk in z])


def first_order(pole: float, gain: float, feedthrough: bool = False) -> SisoSS:
    """gain / (z - pole), or gain z / (z - pole) when ``feedthrough``."""
    if feedthrough:  # g z/(z - a) = g + g a/(z - a)
        return SisoSS.make([[pole]], [1.0], [gain * pole], gain)
    return SisoSS.make([[pole]], [1.0], [gain], 0.0)


def axis_filters(cfg: L1Config, i: int) -> tuple[SisoSS, SisoSS]:
    """Discrete M_i(z), V_i(z) matching the controller's pole-matched updates."""
    am, av = cfg.a_m[i], cfg.a_v[i]
    return first_order(am, 1 - am), first_order(av, 1 - av, feedthrough=True)


def composed_disturbance_system(plant_axis: SisoSS, cfg: L1Config, i: int, dt: float) -> SisoSS:
    """Realization of F H (1 - V) for one axis.

    H = A (1 - V + V M^-1 A)^-1 and F = (s + H V K)^-1 with s -> (z - 1)/dt, written
    with causal blocks only: M^-1 A is proper because A is strictly proper, and
    F is the feedback loop of the integrator I = dt / (z - 1) around H V K.
    """
    A = plant_axis
    if abs(A.D) > 0:
        raise ValueError("plant estimate must be strictly proper")
    am = cfg.a_m[i]
    M, V = axis_filters(cfg, i)
    # (z - am)/(1 - am) * A(z): z A(z) = C A (zI - A)^-1 B + C B for strictly proper A
    MinvA = SisoSS.make(A.A, A.B, A.C @ (A.A - am * np.eye(A.n)) / (1 - am),
                        (A.C @ A.B) / (1 - am))
    one = SisoSS.gain(1.0)
    T = one + V.scale(-1.0) + MinvA.then(V)
    H = T.inverse().then(A)
    integ = first_order(1.0, dt)
    HVK = H.then(V).scale(cfg.kp[i])
    F = integ.feedback(HVK)
    return (one + V.scale(-1.0)).then(H).then(F)


@dataclass(frozen=True)
class L1NormReport:
    bound: float
    holds: bool
    per_axis: np.ndarray
    spectral_radius: float
    tail: float
    stable: bool
    poles: np.ndarray = field(repr=False)


def verify_l1_norm_condition(plant_estimate: StateSpaceModel, cfg: L1Config,
                             horizon_s: float = 20.0) -> L1NormReport:
    """Evaluate L * ||F H (1 - V)||_L1 from the truncated impulse response.

    ``plant_estimate`` is the discrete velocity plant u_L1 -> y1 at the controller
    sample time; channels are treated as decoupled (diagonal transfer matrix).
    Stability is read off the eigenvalues of the composed realization, and the
    neglected tail is bounded geometrically from its spectral radius.
    """
    dt = plant_estimate.dt
    steps = int(round(horizon_s / dt))
    norms, poles_all, tails = [], [], []
    for i in range(plant_estimate.p):
        axis = SisoSS.make(plant_estimate.A, plant_estimate.B[:, i], plant_estimate.C[i])
        G = composed_disturbance_system(axis, cfg, i, dt)
        poles = np.linalg.eigvals(G.A) if G.n else np.zeros(0)
        poles_all.append(poles)
        rho = float(np.max(np.abs(poles))) if poles.size else 0.0
        if rho >= 1:
            norms.append(np.inf)
            tails.append(np.inf)
            continue
        g = G.impulse(steps)
        last = np.max(np.abs(g[-max(1, steps // 20):]))
        tails.append(last * rho / (1 - rho))
        norms.append(np.sum(np.abs(g)))
    poles = np.concatenate(poles_all)
    rho = float(np.max(np.abs(poles))) if poles.size else 0.0
    stable = rho < 1
    per_axis = cfg.lipschitz * np.array(norms) if cfg.lipschitz else np.zeros(len(norms))
    bound = float(np.max(per_axis)) if stable else np.inf
    return L1NormReport(bound, bool(stable and bound < 1), per_axis, rho,
                        float(max(tails)), stable, poles)
