"""Shared generators for random LTI systems and trajectories, plus the acceptance summary hook."""

from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from l1transfer.lti import StateSpaceModel

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def well_conditioned(rng, n, lo=0.5, hi=2.0):
    """Random matrix with singular values in [lo, hi]."""
    return random_orthogonal(rng, n) @ np.diag(rng.uniform(lo, hi, n)) @ random_orthogonal(rng, n)


def random_stable_model(rng, n, p, rho=0.9, dt=0.01) -> StateSpaceModel:
    A = rng.standard_normal((n, n))
    A *= rho / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    return StateSpaceModel(A, rng.standard_normal((n, p)), rng.standard_normal((p, n)), dt)


def normal_form_model(rng, r, n, zeros=None, rho_zero=0.9, coupling=0.3, transform=True,
                      dt=0.01):
    """Square system with vector relative degree ``r`` and zero dynamics of order n - sum(r).

    Per channel i the states form a delay chain of length r_i whose last state is
    driven by a random row of the full state plus A0_i u; the remaining states
    evolve as eta+ = Q eta + P xi, so the zero dynamics are exactly Q. ``zeros``
    sets the eigenvalues of Q (defaults to random ones inside radius ``rho_zero``).
    Returns (model, A0, eigenvalues of Q).
    """
    r = tuple(int(v) for v in r)
    p, total = len(r), sum(r)
    nz = n - total
    if nz < 0:
        raise ValueError("n must be at least sum(r)")
    A = np.zeros((n, n))
    B = np.zeros((n, p))
    C = np.zeros((p, n))
    A0 = well_conditioned(rng, p)
    start = 0
    for i, ri in enumerate(r):
        for k in range(ri - 1):
            A[start + k, start + k + 1] = 1.0
        A[start + ri - 1] = coupling * rng.standard_normal(n)
        B[start + ri - 1] = A0[i]
        C[i, start] = 1.0
        start += ri
    if nz:
        if zeros is None:
            zeros = rng.uniform(-rho_zero, rho_zero, nz)
        zeros = np.asarray(zeros, dtype=float)
        V = well_conditioned(rng, nz, 0.8, 1.25)
        Q = V @ np.diag(zeros) @ np.linalg.inv(V)
        A[total:, total:] = Q
        A[total:, :total] = coupling * rng.standard_normal((nz, total))
    else:
        zeros = np.zeros(0)
    model = StateSpaceModel(A, B, C, dt)
    if transform:
        model = model.transform(well_conditioned(rng, n, 0.7, 1.4))
    return model, A0, np.asarray(zeros)


def random_relative_degree(rng, max_n=8, max_p=3, max_r=3):
    p = int(rng.integers(1, max_p + 1))
    r = tuple(int(v) for v in rng.integers(1, max_r + 1, p))
    while sum(r) > max_n:
        r = tuple(max(1, v - 1) for v in r)
    n = int(rng.integers(sum(r), max_n + 1))
    return r, n


def smooth_signal(rng, length, p, n_freq=6, dt=0.01, max_hz=2.0):
    """Sum of random low-frequency sinusoids per channel, samples 0..length-1."""
    t = np.arange(length) * dt
    out = np.zeros((length, p))
    for i in range(p):
        f = rng.uniform(0.05, max_hz, n_freq)
        a = rng.uniform(0.2, 1.0, n_freq)
        ph = rng.uniform(0, 2 * np.pi, n_freq)
        out[:, i] = np.sum(a[:, None] * np.sin(2 * np.pi * f[:, None] * t[None, :] + ph[:, None]),
                           axis=0)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Default-config learn and matrix through the command line, timed together."""
    from l1transfer import cli
    out = tmp_path_factory.mktemp("default")
    start = time.perf_counter()
    assert cli.main(["--out", str(out), "--quiet", "learn"]) == 0
    assert cli.main(["--out", str(out), "--quiet", "matrix"]) == 0
    return out, time.perf_counter() - start
