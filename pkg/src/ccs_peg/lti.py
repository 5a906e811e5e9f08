"""Discrete-time LTI systems: construction and simulation.

Every block of the force loop (controller, inner position loop, contact
gain, sensor delay) is a :class:`DiscreteLti`.  State-space is the
canonical form; FIR systems keep their taps so that synthesis can work on
them directly and convolution-based simulation stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

SAMPLE_PERIOD = 1.0 / 125.0

# relative tolerance used to decide that two sample periods are "the same"
_DT_RTOL = 1e-12


class DimensionError(ValueError):
    """Raised when system or signal dimensions do not line up."""


class IllPosedLoopError(ValueError):
    """Raised when an algebraic loop cannot be closed (I - D singular)."""


class SamplePeriodError(ValueError):
    """Raised when systems with different sample periods are combined."""


@dataclass(frozen=True, eq=False)
class DiscreteLti:
    """x[k+1] = A x[k] + B u[k],  y[k] = C x[k] + D u[k].

    ``taps`` is set for SISO FIR systems, in which case A is a shift
    register and the state-space matrices are derived from the taps.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: float = SAMPLE_PERIOD
    taps: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        p, m = D.shape
        A = np.asarray(self.A, dtype=float)
        n = 0 if A.size == 0 else A.shape[0]
        A = A.reshape(n, n) if n else np.zeros((0, 0))
        B = np.asarray(self.B, dtype=float).reshape(n, m) if n else np.zeros((0, m))
        C = np.asarray(self.C, dtype=float).reshape(p, n) if n else np.zeros((p, 0))
        if n and (A.shape != (n, n)):
            raise DimensionError(f"A must be square, got {A.shape}")
        for name, arr in (("A", A), ("B", B), ("C", C), ("D", D)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        if self.dt <= 0:
            raise ValueError("sample period must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        if self.taps is not None:
            object.__setattr__(self, "taps", np.asarray(self.taps, dtype=float).ravel())

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.D.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.D.shape[0]

    @property
    def is_fir(self) -> bool:
        return self.taps is not None

    @property
    def is_siso(self) -> bool:
        return self.D.shape == (1, 1)

    def impulse(self, n: int) -> np.ndarray:
        """First ``n`` samples of the impulse response (SISO: shape (n,))."""
        if self.is_fir:
            h = np.zeros(n)
            k = min(n, len(self.taps))
            h[:k] = self.taps[:k]
            return h
        u = np.zeros((n, self.n_inputs))
        out = np.zeros((n, self.n_outputs, self.n_inputs))
        for j in range(self.n_inputs):
            u[:] = 0.0
            u[0, j] = 1.0
            out[:, :, j] = np.asarray(simulate(self, u)).reshape(n, self.n_outputs)
        return out[:, 0, 0] if self.is_siso else out

    def dcgain(self) -> np.ndarray:
        if self.is_fir:
            return np.array([[self.taps.sum()]])
        n = self.n_states
        if n == 0:
            return self.D.copy()
        return self.C @ np.linalg.solve(np.eye(n) - self.A, self.B) + self.D

    def __neg__(self) -> "DiscreteLti":
        return scale(self, -1.0)

    def __repr__(self):
        kind = f"FIR[{len(self.taps)}]" if self.is_fir else f"SS[n={self.n_states}]"
        return f"DiscreteLti({kind}, {self.n_outputs}x{self.n_inputs}, dt={self.dt:g})"


@dataclass(frozen=True, eq=False)
class FrequencyResponse:
    """Complex response sampled on an angular-frequency grid (rad/s)."""

    grid: np.ndarray
    values: np.ndarray
    dt: float = SAMPLE_PERIOD

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 1 or g.size == 0:
            raise ValueError("grid must be a non-empty vector")
        if np.any(g <= 0) or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be positive and strictly increasing")
        if g[-1] > np.pi / self.dt * (1 + 1e-12):
            raise ValueError("grid exceeds the Nyquist frequency")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", np.asarray(self.values))

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)


# -- constructors -----------------------------------------------------------

def state_space(A, B, C, D, dt: float = SAMPLE_PERIOD) -> DiscreteLti:
    return DiscreteLti(A, B, C, D, dt)


def fir(taps: Sequence[float], dt: float = SAMPLE_PERIOD) -> DiscreteLti:
    """SISO FIR system y[k] = sum_i taps[i] u[k-i], realized as a shift register."""
    h = np.asarray(taps, dtype=float).ravel()
    if h.size == 0:
        raise ValueError("FIR needs at least one tap")
    n = h.size - 1
    A = np.eye(n, k=-1) if n else np.zeros((0, 0))
    B = np.zeros((n, 1))
    if n:
        B[0, 0] = 1.0
    C = h[1:].reshape(1, n)
    return DiscreteLti(A, B, C, h[:1].reshape(1, 1), dt, taps=h)


def gain(g, dt: float = SAMPLE_PERIOD) -> DiscreteLti:
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if g.shape == (1, 1):
        return fir([g[0, 0]], dt)
    p, m = g.shape
    return DiscreteLti(np.zeros((0, 0)), np.zeros((0, m)), np.zeros((p, 0)), g, dt)


def identity(dt: float = SAMPLE_PERIOD) -> DiscreteLti:
    return gain(1.0, dt)


def delay(steps: int, dt: float = SAMPLE_PERIOD) -> DiscreteLti:
    if steps < 0:
        raise ValueError("delay must be non-negative")
    taps = np.zeros(steps + 1)
    taps[-1] = 1.0
    return fir(taps, dt)


def integrator(gain_per_step: float = 1.0, dt: float = SAMPLE_PERIOD) -> DiscreteLti:
    """Forward-Euler accumulator y[k] = sum_{i<k} g u[i] (strictly proper)."""
    return DiscreteLti([[1.0]], [[gain_per_step]], [[1.0]], [[0.0]], dt)


def zoh(Ac, Bc, Cc, Dc, dt: float = SAMPLE_PERIOD) -> DiscreteLti:
    """Zero-order-hold discretization of a continuous state-space model."""
    Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
    Bc = np.atleast_2d(np.asarray(Bc, dtype=float))
    n, m = Bc.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    E = expm(M * dt)
    return DiscreteLti(E[:n, :n], E[:n, n:], Cc, Dc, dt)


def second_order_lag(natural_freq_hz: float, damping: float,
                     dt: float = SAMPLE_PERIOD) -> DiscreteLti:
    """Unity-DC-gain wn^2 / (s^2 + 2 zeta wn s + wn^2), ZOH-discretized."""
    wn = 2.0 * np.pi * natural_freq_hz
    Ac = [[0.0, 1.0], [-wn * wn, -2.0 * damping * wn]]
    Bc = [[0.0], [wn * wn]]
    return zoh(Ac, Bc, [[1.0, 0.0]], [[0.0]], dt)


def to_state_space(sys: DiscreteLti) -> DiscreteLti:
    """Drop the FIR tag; matrices are already a valid realization."""
    if not sys.is_fir:
        return sys
    return DiscreteLti(sys.A, sys.B, sys.C, sys.D, sys.dt)


def to_fir(sys: DiscreteLti, n_taps: Optional[int] = None, tol: float = 1e-12) -> DiscreteLti:
    """FIR from the impulse response.

    With ``n_taps`` omitted the system must have a nilpotent A; the length is
    then the nilpotency index and the conversion is exact.
    """
    if sys.is_fir and n_taps is None:
        return sys
    if not sys.is_siso:
        raise DimensionError("FIR form is SISO only")
    if n_taps is None:
        n = sys.n_states
        if n and np.max(np.abs(np.linalg.matrix_power(sys.A, n))) > tol:
            raise ValueError("A is not nilpotent; pass n_taps to truncate")
        n_taps = n + 1
    return fir(sys.impulse(n_taps), sys.dt)


# -- checks -----------------------------------------------------------------

def _check_dt(*systems: DiscreteLti) -> float:
    dt = systems[0].dt
    for s in systems[1:]:
        if abs(s.dt - dt) > _DT_RTOL * dt:
            raise SamplePeriodError(f"sample periods differ: {dt} vs {s.dt}")
    return dt


# -- simulation ---------------------------------------------------------------

def simulate(sys: DiscreteLti, u, x0=None) -> np.ndarray:
    """Response to the input sequence ``u`` from x[0] = x0 (default zero).

    ``u`` is (N,) for single-input systems or (N, m).  The output is (N,)
    for SISO systems and (N, p) otherwise.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        raise DimensionError("input must be a sequence")
    siso_in = u.ndim == 1
    U = u.reshape(-1, 1) if siso_in else u
    if U.shape[0] < 1:
        raise ValueError("input must have at least one sample")
    if U.shape[1] != sys.n_inputs:
        raise DimensionError(
            f"input has {U.shape[1]} channels, system expects {sys.n_inputs}")
    N = U.shape[0]
    if sys.is_fir and x0 is None:
        y = np.convolve(U[:, 0], sys.taps)[:N]
        return y if sys.is_siso else y.reshape(-1, 1)
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    x = np.zeros(sys.n_states) if x0 is None else np.asarray(x0, dtype=float).copy()
    Y = np.empty((N, sys.n_outputs))
    for k in range(N):
        Y[k] = C @ x + D @ U[k]
        x = A @ x + B @ U[k]
    if sys.is_siso:
        return Y[:, 0]
    return Y


# -- composition --------------------------------------------------------------

def series(*systems: DiscreteLti) -> DiscreteLti:
    """Cascade: the first system's output feeds the second, and so on."""
    if not systems:
        raise ValueError("series needs at least one system")
    out = systems[0]
    for nxt in systems[1:]:
        out = _series2(out, nxt)
    return out


def _series2(a: DiscreteLti, b: DiscreteLti) -> DiscreteLti:
    dt = _check_dt(a, b)
    if a.n_outputs != b.n_inputs:
        raise DimensionError(
            f"cannot cascade {a.n_outputs} outputs into {b.n_inputs} inputs")
    if a.is_fir and b.is_fir:
        return fir(np.convolve(a.taps, b.taps), dt)
    na, nb = a.n_states, b.n_states
    A = np.zeros((na + nb, na + nb))
    A[:na, :na] = a.A
    A[na:, :na] = b.B @ a.C
    A[na:, na:] = b.A
    B = np.vstack([a.B, b.B @ a.D])
    C = np.hstack([b.D @ a.C, b.C])
    D = b.D @ a.D
    return DiscreteLti(A, B, C, D, dt)


def parallel(a: DiscreteLti, b: DiscreteLti, sign: float = 1.0) -> DiscreteLti:
    """y = a u + sign * b u."""
    dt = _check_dt(a, b)
    if (a.n_inputs, a.n_outputs) != (b.n_inputs, b.n_outputs):
        raise DimensionError("parallel systems must have equal dimensions")
    if a.is_fir and b.is_fir:
        n = max(len(a.taps), len(b.taps))
        h = np.zeros(n)
        h[:len(a.taps)] += a.taps
        h[:len(b.taps)] += sign * b.taps
        return fir(h, dt)
    na, nb = a.n_states, b.n_states
    A = np.zeros((na + nb, na + nb))
    A[:na, :na] = a.A
    A[na:, na:] = b.A
    B = np.vstack([a.B, b.B])
    C = np.hstack([a.C, sign * b.C])
    return DiscreteLti(A, B, C, a.D + sign * b.D, dt)


def scale(sys: DiscreteLti, k: float) -> DiscreteLti:
    if sys.is_fir:
        return fir(k * sys.taps, sys.dt)
    return DiscreteLti(sys.A, sys.B, k * sys.C, k * sys.D, sys.dt)


def feedback(loop: DiscreteLti, sign: float = -1.0) -> DiscreteLti:
    """Close a unity loop around ``loop``: y = loop (u + sign * y).

    The default negative sign gives y = loop (u - y).
    """
    if loop.n_inputs != loop.n_outputs:
        raise DimensionError("unity feedback needs a square system")
    p = loop.n_outputs
    M = np.eye(p) - sign * loop.D
    if abs(np.linalg.det(M)) < 1e-12:
        raise IllPosedLoopError("I - sign*D is singular; algebraic loop is ill-posed")
    Minv = np.linalg.inv(M)
    # y = Minv (C x + D u);  e = u + sign y
    Cy = Minv @ loop.C
    Dy = Minv @ loop.D
    A = loop.A + sign * loop.B @ Cy
    B = loop.B @ (np.eye(p) + sign * Dy)
    return DiscreteLti(A, B, Cy, Dy, loop.dt)


def feedback_pair(forward: DiscreteLti, backward: DiscreteLti,
                  sign: float = -1.0) -> DiscreteLti:
    """y = forward (u + sign * backward y), realized without duplicate states."""
    dt = _check_dt(forward, backward)
    if forward.n_inputs != backward.n_outputs or forward.n_outputs != backward.n_inputs:
        raise DimensionError("forward and backward paths do not conform")
    f, b = to_state_space(forward), to_state_space(backward)
    p = f.n_outputs
    M = np.eye(p) - sign * f.D @ b.D
    if abs(np.linalg.det(M)) < 1e-12:
        raise IllPosedLoopError("I - sign*Df*Db is singular; algebraic loop is ill-posed")
    Minv = np.linalg.inv(M)
    nf = f.n_states
    # y = Cy [xf; xb] + Dy u
    Cy = Minv @ np.hstack([f.C, sign * f.D @ b.C])
    Dy = Minv @ f.D
    # e = u + sign (Cb xb + Db y)
    Ce = sign * (np.hstack([np.zeros((b.n_outputs, nf)), b.C]) + b.D @ Cy)
    De = np.eye(f.n_inputs) + sign * b.D @ Dy
    n = nf + b.n_states
    A = np.zeros((n, n))
    A[:nf, :nf] = f.A
    A[nf:, nf:] = b.A
    A[:nf] += f.B @ Ce
    A[nf:] += b.B @ Cy
    B = np.vstack([f.B @ De, b.B @ Dy])
    return DiscreteLti(A, B, Cy, Dy, dt)


def loop_inverse(loop: DiscreteLti, sign: float = -1.0) -> DiscreteLti:
    """(I - sign * loop)^-1, i.e. the map u -> e with e = u + sign * loop e."""
    if loop.n_inputs != loop.n_outputs:
        raise DimensionError("loop must be square")
    p = loop.n_outputs
    M = np.eye(p) - sign * loop.D
    if abs(np.linalg.det(M)) < 1e-12:
        raise IllPosedLoopError("I - sign*D is singular; algebraic loop is ill-posed")
    Minv = np.linalg.inv(M)
    Ce = sign * Minv @ loop.C
    De = Minv
    A = loop.A + loop.B @ Ce
    B = loop.B @ De
    return DiscreteLti(A, B, Ce, De, loop.dt)


# -- analysis -----------------------------------------------------------------

def spectral_radius(sys: DiscreteLti) -> float:
    """max |eig(A)|; the system is asymptotically stable iff this is < 1."""
    if sys.n_states == 0:
        return 0.0
    if sys.is_fir:
        return 0.0
    try:
        ev = np.linalg.eigvals(sys.A)
    except np.linalg.LinAlgError as exc:  # QR iteration did not converge
        raise np.linalg.LinAlgError(f"eigenvalue iteration failed: {exc}") from exc
    return float(np.max(np.abs(ev)))


def is_stable(sys: DiscreteLti) -> bool:
    return spectral_radius(sys) < 1.0


def freq_response(sys: DiscreteLti, grid) -> FrequencyResponse:
    """C (e^{jwT} I - A)^-1 B + D on the angular-frequency grid (rad/s)."""
    grid = np.asarray(grid, dtype=float)
    fr_check = FrequencyResponse(grid, np.zeros(grid.shape), sys.dt)
    z = np.exp(1j * fr_check.grid * sys.dt)
    if sys.is_fir:
        k = np.arange(len(sys.taps))
        vals = np.exp(-1j * np.outer(fr_check.grid * sys.dt, k)) @ sys.taps
        return FrequencyResponse(fr_check.grid, vals, sys.dt)
    n = sys.n_states
    out = np.empty((len(z), sys.n_outputs, sys.n_inputs), dtype=complex)
    eye = np.eye(n)
    for i, zi in enumerate(z):
        if n:
            M = zi * eye - sys.A
            if np.linalg.cond(M) > 1e14:
                raise ZeroDivisionError(f"pole on the unit circle at w={grid[i]:g} rad/s")
            out[i] = sys.C @ np.linalg.solve(M, sys.B) + sys.D
        else:
            out[i] = sys.D
    vals = out[:, 0, 0] if sys.is_siso else out
    return FrequencyResponse(fr_check.grid, vals, sys.dt)
