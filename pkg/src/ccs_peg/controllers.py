"""Runtime force laws and the per-axis hybrid position/force arbiter.

Conventions used throughout:

* Forces are those the peg applies to the environment, expressed in a
  Cartesian frame whose z axis points down into the surface (``F^c``).
* Positions are world coordinates in mm with z pointing up.
* A force law outputs ``u``, the commanded displacement (mm) in the
  direction that increases the controlled force.  ``AXIS_SIGN`` maps it
  onto world axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import lti
from .lti import DiscreteLti
from .synthesis import ContactPlantModel, SynthesizedController, build_plant, closed_loop

DEFAULT_CLAMP = 0.5  # mm per step
AXIS_SIGN = np.array([1.0, 1.0, -1.0])


class NonFiniteError(FloatingPointError):
    """Raised when a controller is fed NaN or inf."""


# -- command modes --------------------------------------------------------------

@dataclass(frozen=True)
class Force:
    setpoint: float


@dataclass(frozen=True)
class Position:
    target: float


@dataclass(frozen=True)
class Ramp:
    final: float
    slope: float = 10.0  # N/s

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError(f"ramp slope must be positive, got {self.slope}")

    def setpoint(self, t_in_state: float) -> float:
        return min(self.final, self.slope * max(t_in_state, 0.0))


@dataclass(frozen=True)
class Off:
    pass


AxisCommandMode = Union[Force, Position, Ramp, Off]
CARTESIAN = "cartesian"
WRENCH = "wrench"


def is_force_mode(mode) -> bool:
    return isinstance(mode, (Force, Ramp))


@dataclass(frozen=True)
class HybridFrame:
    modes: tuple
    frame: str = CARTESIAN

    def __post_init__(self):
        if len(self.modes) != 3:
            raise ValueError("a hybrid frame needs exactly one mode per axis")
        for m in self.modes:
            if not isinstance(m, (Force, Position, Ramp, Off)):
                raise TypeError(f"unknown axis mode {m!r}")
        if self.frame not in (CARTESIAN, WRENCH):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.frame == WRENCH:
            y, z = self.modes[1], self.modes[2]
            if not (is_force_mode(y) and is_force_mode(z)):
                raise ValueError("wrench-frame y and z must both be force controlled")


def wrench_rotation(tilt_deg: float) -> np.ndarray:
    """Columns are the tool axes expressed in the Cartesian force frame.

    The tool frame shares x with the Cartesian frame.  Its y axis points
    toward the peg's lowest point perpendicular to the peg axis, and its z
    axis points up along the peg.  The Cartesian force frame points z down,
    so the map is a symmetric reflection with F^c = R @ F^w.  A negative
    F^w_z presses the peg down along its own axis.
    """
    th = math.radians(tilt_deg)
    c, s = math.cos(th), math.sin(th)
    return np.array([[1.0, 0.0, 0.0],
                     [0.0, c, s],
                     [0.0, s, -c]])


# -- force laws --------------------------------------------------------------

class ForceLaw:
    clamp: float = DEFAULT_CLAMP

    def step(self, f_err: float) -> float:
        """Return the new commanded displacement u (mm)."""
        raise NotImplementedError

    def reset(self) -> None:
        raise NotImplementedError

    @property
    def output(self) -> float:
        raise NotImplementedError


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite controller input: {x}")


class IntegralLaw(ForceLaw):
    """u[k] = u[k-1] + clip(Ki * f_err * dt, +-clamp)."""

    def __init__(self, ki: float, dt: float = lti.SAMPLE_PERIOD, clamp: float = DEFAULT_CLAMP):
        if not ki >= 0:
            raise ValueError("Ki must be non-negative")
        if not clamp > 0:
            raise ValueError("clamp must be positive")
        self.ki, self.dt, self.clamp = ki, dt, clamp
        self.u = 0.0

    def increment(self, f_err: float) -> float:
        _check_finite(f_err)
        raw = self.ki * f_err * self.dt
        return min(self.clamp, max(-self.clamp, raw))

    def step(self, f_err: float) -> float:
        self.u += self.increment(f_err)
        return self.u

    def reset(self) -> None:
        self.u = 0.0

    @property
    def output(self) -> float:
        return self.u


class ImcLaw(ForceLaw):
    """Synthesized law K = Q (1 - G Q)^-1 run in internal-model form.

    v = f_err + G_model(u_applied), u_raw = Q v.  Feeding the model with the
    clamped output keeps the loop consistent when the rate clamp is active,
    which is the anti-windup mechanism.
    """

    def __init__(self, q: Sequence[float], internal_model: DiscreteLti,
                 clamp: float = DEFAULT_CLAMP):
        self.q = np.asarray(q, dtype=float)
        self.model = lti.to_state_space(internal_model)
        if abs(self.model.D[0, 0]) > 0:
            raise ValueError("internal model must be strictly proper")
        self.clamp = clamp
        self.reset()

    @classmethod
    def from_synthesized(cls, ctrl: SynthesizedController, clamp: float = DEFAULT_CLAMP):
        if ctrl.internal_model is None:
            raise ValueError("controller export lacks the internal model")
        return cls(ctrl.q, ctrl.internal_model, clamp)

    def reset(self) -> None:
        self._v = np.zeros(len(self.q))
        self._x = np.zeros(self.model.n_states)
        self.u = 0.0

    def step(self, f_err: float) -> float:
        _check_finite(f_err)
        A, B, C = self.model.A, self.model.B, self.model.C
        g_out = float(C[0] @ self._x)
        self._v = np.roll(self._v, 1)
        self._v[0] = f_err + g_out
        u_raw = float(self.q @ self._v)
        du = min(self.clamp, max(-self.clamp, u_raw - self.u))
        self.u += du
        self._x = A @ self._x + B[:, 0] * self.u
        return self.u

    @property
    def output(self) -> float:
        return self.u


class LtiLaw(ForceLaw):
    """Any state-space controller stepped directly, with an output rate clamp."""

    def __init__(self, sys: DiscreteLti, clamp: float = DEFAULT_CLAMP):
        self.sys = lti.to_state_space(sys)
        self.clamp = clamp
        self.reset()

    def reset(self) -> None:
        self._x = np.zeros(self.sys.n_states)
        self.u = 0.0

    def step(self, f_err: float) -> float:
        _check_finite(f_err)
        s = self.sys
        raw = float(s.C[0] @ self._x + s.D[0, 0] * f_err)
        self._x = s.A @ self._x + s.B[:, 0] * f_err
        self.u += min(self.clamp, max(-self.clamp, raw - self.u))
        return self.u

    @property
    def output(self) -> float:
        return self.u


@dataclass
class ControllerState:
    """One axis worth of force-law state."""
    law: ForceLaw

    def step(self, f_err: float) -> float:
        return self.law.step(f_err)


def step_force_law(state: ControllerState, f_err: float) -> float:
    """Advance one sample; returns the position increment (mm) of this step."""
    before = state.law.output
    return state.law.step(f_err) - before


# -- tuning ------------------------------------------------------------------

def tune_integral(target_tau: float, stiffness: float) -> float:
    """Ki = 1 / (tau k), giving time constant tau with an ideal inner loop."""
    if not (target_tau > 0 and stiffness > 0):
        raise ValueError("target_tau and stiffness must be positive")
    return 1.0 / (target_tau * stiffness)


def integral_system(ki: float, dt: float = lti.SAMPLE_PERIOD) -> DiscreteLti:
    """K(z) = Ki dt z / (z - 1): the runtime integral law without clamping."""
    return lti.state_space([[1.0]], [[1.0]], [[ki * dt]], [[ki * dt]], dt)


def integral_closed_loop_radius(ki: float, model: ContactPlantModel) -> float:
    H = closed_loop(build_plant(model), integral_system(ki, model.inner_loop.dt))
    return lti.spectral_radius(H)


def critical_integral_gain(model: ContactPlantModel, hi: float = 100.0,
                           tol: float = 1e-9) -> float:
    """Smallest Ki that destabilizes the integral loop on ``model`` (bisection)."""
    lo = 0.0
    if integral_closed_loop_radius(hi, model) < 1.0:
        raise ValueError("upper bracket is still stable")
    while hi - lo > tol * max(hi, 1.0):
        mid = 0.5 * (lo + hi)
        if integral_closed_loop_radius(mid, model) < 1.0:
            lo = mid
        else:
            hi = mid
    return lo


def tune_integral_margin(model: ContactPlantModel, gain_margin: float = 2.0) -> float:
    """Largest Ki whose loop on ``model`` has at least ``gain_margin``."""
    if gain_margin < 1.0:
        raise ValueError("gain margin must be >= 1")
    return critical_integral_gain(model) / gain_margin


# -- steady-state detection ---------------------------------------------------

@dataclass(frozen=True)
class SteadyStateCriteria:
    window: float = 0.5  # s
    force_std: float = 0.3  # N
    position_drift: float = 0.05  # mm
    skip_axes: tuple = (0,)


def steady_state_reached(forces, positions, dt: float = lti.SAMPLE_PERIOD,
                         criteria: SteadyStateCriteria = SteadyStateCriteria()) -> bool:
    """True iff the trailing window is settled on every non-skipped axis.

    Force settles when its sample std-dev is below the threshold.  Drift is
    the change between the mean of the first and last fifth of the window,
    which averages sensor noise out of the comparison.
    """
    F = np.asarray(forces, dtype=float)
    P = np.asarray(positions, dtype=float)
    n = int(round(criteria.window / dt))
    if len(F) < n or len(P) < n or n < 2:
        return False
    F, P = F[-n:], P[-n:]
    axes = [a for a in range(F.shape[1]) if a not in criteria.skip_axes]
    if not axes:
        return True
    if np.any(F[:, axes].std(axis=0) >= criteria.force_std):
        return False
    m = max(1, n // 5)
    drift = np.abs(P[-m:, axes].mean(axis=0) - P[:m, axes].mean(axis=0))
    return bool(np.all(drift < criteria.position_drift))


# -- hybrid arbiter ------------------------------------------------------------


class HybridController:
    """Per-axis arbitration between position pass-through and force laws.

    A force law's state persists while its axis stays force controlled and
    is reset (with a fresh base position) whenever the axis re-enters force
    control from Position or Off.
    """

    def __init__(self, law_factory, initial_position: Sequence[float]):
        self.law_factory = law_factory
        self.command = np.asarray(initial_position, dtype=float).copy()
        self.laws: list[Optional[ForceLaw]] = [None, None, None]
        self.base = self.command.copy()
        self.setpoints = np.full(3, np.nan)

    def step(self, frame: HybridFrame, force_c, tilt_deg: float = 0.0,
             t_in_state: float = 0.0) -> np.ndarray:
        """Return the Cartesian position command (mm, world frame).

        ``force_c`` is the measured F^c; ``tilt_deg`` the current tool tilt.
        """
        force_c = np.asarray(force_c, dtype=float)
        _check_finite(force_c)
        sp = np.full(3, np.nan)
        for a, m in enumerate(frame.modes):
            if isinstance(m, Force):
                sp[a] = m.setpoint
            elif isinstance(m, Ramp):
                sp[a] = m.setpoint(t_in_state)
        if frame.frame == WRENCH:
            R = wrench_rotation(tilt_deg)
            w = np.where(np.isnan(sp), 0.0, sp)
            c = R @ w
            sp[1:] = c[1:]
        self.setpoints = sp
        for a, m in enumerate(frame.modes):
            if isinstance(m, Position):
                self.laws[a] = None
                self.command[a] = m.target
            elif isinstance(m, Off):
                self.laws[a] = None
            else:
                if self.laws[a] is None:
                    self.laws[a] = self.law_factory()
                    self.laws[a].reset()
                    self.base[a] = self.command[a]
                u = self.laws[a].step(sp[a] - force_c[a])
                self.command[a] = self.base[a] + AXIS_SIGN[a] * u
        return self.command.copy()


def step_hybrid(frame: HybridFrame, force_c, states: HybridController,
                tilt_deg: float = 0.0, t_in_state: float = 0.0) -> np.ndarray:
    return states.step(frame, force_c, tilt_deg, t_in_state)


# -- factories ------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerChoice:
    """Which force law the trial uses and its parameters."""
    kind: str  # "ccs" | "int_s" | "int_h"
    ki: float = 0.0
    synthesized: Optional[SynthesizedController] = field(default=None, compare=False)
    clamp: float = DEFAULT_CLAMP

    def factory(self):
        if self.kind == "ccs":
            if self.synthesized is None:
                raise ValueError("ccs controller needs a synthesized design")
            ctrl = self.synthesized
            return lambda: ImcLaw.from_synthesized(ctrl, self.clamp)
        ki, clamp = self.ki, self.clamp
        return lambda: IntegralLaw(ki, clamp=clamp)
