"""Eight-state assembly strategy: approach, spiral search, staged insertion.

Each state maps the delayed sensor frame to a :class:`HybridFrame` and a
tool tilt command.  Forces in the frame are F^c (z down); positions are
world coordinates (z up).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

from .controllers import (CARTESIAN, WRENCH, Force, HybridFrame, Off, Position, Ramp,
                          SteadyStateCriteria, steady_state_reached)
from .lti import SAMPLE_PERIOD


class AssemblyState(IntEnum):
    I = 1
    II = 2
    III = 3
    IV = 4
    V = 5
    VI = 6
    VII = 7
    VIII = 8
    FAILED = 99

    @property
    def label(self) -> str:
        return "FAILED" if self is AssemblyState.FAILED else self.name


STATE_NAMES = {
    AssemblyState.I: "Approach",
    AssemblyState.II: "SpiralSearch",
    AssemblyState.III: "MoveToHole",
    AssemblyState.IV: "TwoPointContact",
    AssemblyState.V: "ThreePointContact",
    AssemblyState.VI: "TiltAlign",
    AssemblyState.VII: "Insert",
    AssemblyState.VIII: "Done",
}


# -- spiral -------------------------------------------------------------------

@dataclass
class SpiralState:
    origin: tuple
    pitch: float = 7.5  # mm
    theta_est: float = 0.0
    v: float = 0.0  # mm/s
    v_max: float = 15.0
    literal: bool = False  # reproduce the printed cos/cos form

    def __post_init__(self):
        if self.pitch <= 0:
            raise ValueError("pitch must be positive")
        if not 0 <= self.v <= self.v_max:
            raise ValueError("speed outside [0, v_max]")

    @property
    def r(self) -> float:
        return self.pitch / (2 * math.pi) * self.theta_est

    def point(self) -> tuple[float, float]:
        x0, y0 = self.origin
        r, th = self.r, self.theta_est
        if self.literal:
            return x0 + r * math.cos(th), y0 + r * math.cos(th)
        return x0 + r * math.cos(th), y0 + r * math.sin(th)


def spiral_step(s: SpiralState, dt: float = SAMPLE_PERIOD) -> tuple[float, float]:
    """Advance the Archimedean spiral by arc length v dt and return (P_x, P_y).

    The arc length grows as ds/dtheta = sqrt(r^2 + b^2) with b = p / 2 pi.
    The first-order step dtheta = v dt / sqrt(r^2 + b^2) overshoots the
    speed by up to 1.8 % where r is comparable to b, so the step also
    carries the second-order term d2s/dtheta2 = r b / sqrt(r^2 + b^2) and
    solves the quadratic for dtheta.  At r = 0 the term vanishes and the
    step equals the first-order one.
    """
    b = s.pitch / (2 * math.pi)
    a = math.hypot(s.r, b)
    c = 0.5 * s.r * b / a
    ds = s.v * dt
    s.theta_est += 2.0 * ds / (a + math.sqrt(a * a + 4.0 * c * ds))
    return s.point()


def coverage_bound(radius: float, pitch: float) -> float:
    """theta_est after which every point within ``radius`` is within pitch/2 of the path."""
    return 2 * math.pi * (radius / pitch + 1.0)


@dataclass(frozen=True)
class SpeedModulation:
    accel: float = 75.0  # mm/s^2
    v_max: float = 15.0
    contact_epsilon: float = 0.3  # N


def modulate_speed(f_z: float, v: float, dt: float = SAMPLE_PERIOD,
                   m: SpeedModulation = SpeedModulation()) -> float:
    """Decelerate towards 0 when contact is lost, accelerate to v_max otherwise."""
    if f_z <= m.contact_epsilon:
        return max(0.0, v - m.accel * dt)
    return min(m.v_max, v + m.accel * dt)


# -- hole detection -------------------------------------------------------------

@dataclass
class HoleDetector:
    threshold: float = 2.0  # mm
    max_pz: float = -math.inf
    min_pz: float = math.inf
    argmin_xy: Optional[tuple] = None

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("hole detection threshold must be positive")

    @property
    def span(self) -> float:
        return self.max_pz - self.min_pz if self.argmin_xy is not None else 0.0


def detect_hole(d: HoleDetector, p_z: float, xy: Optional[tuple] = None) -> bool:
    if p_z > d.max_pz:
        d.max_pz = p_z
    if p_z < d.min_pz:
        d.min_pz = p_z
        d.argmin_xy = None if xy is None else (float(xy[0]), float(xy[1]))
    return d.max_pz - d.min_pz >= d.threshold


# -- the state machine -----------------------------------------------------------

@dataclass(frozen=True)
class OscillationCriteria:
    """Sustained force-tracking oscillation that counts as loop instability.

    The tracking error is first averaged over ``smoothing`` seconds to strip
    sensor noise.  A swing is a sign change of that averaged error between
    excursions of at least ``amplitude`` newtons.  Swings no more than ``max_gap`` seconds
    apart form a chain; a chain lasting ``duration`` seconds on one
    force-controlled axis flags the loop as unstable.  Short chatter while a
    contact configuration changes stays well below that duration.
    """

    amplitude: float = 0.5  # N
    max_gap: float = 0.5  # s
    duration: float = 3.0  # s
    smoothing: float = 0.08  # s

    def __post_init__(self):
        if self.smoothing < 0:
            raise ValueError("smoothing window must be non-negative")
        if not (self.amplitude > 0 and self.max_gap > 0 and self.duration > 0):
            raise ValueError("oscillation criteria must all be positive")


@dataclass(frozen=True)
class StrategyParams:
    tilt: float = 30.0  # deg
    approach_height: float = 2.0  # mm above the surface
    approach_speed: float = 2.0  # mm/s
    contact_force: float = 0.5  # N, first-contact threshold
    search_force: float = 1.0  # N
    pitch: float = 7.5
    speed: SpeedModulation = SpeedModulation()
    lateral_guard: float = 0.0  # N; > 0 also slows the spiral on lateral load
    hole_threshold: float = 2.0
    move_speed: float = 10.0  # mm/s in state III
    two_point_force: float = 10.0
    three_point_wrench: tuple = (0.0, 15.0, -3.0)
    tilt_force: tuple = (5.0, 2.0)  # (y, z) while tilting
    tilt_rate: float = 15.0  # deg/s
    insert_force: float = 20.0
    ramp_slope: float = 10.0
    depth_done: float = 15.0
    force_limit: float = 50.0
    state_timeout: float = 30.0
    steady: SteadyStateCriteria = SteadyStateCriteria()
    oscillation: OscillationCriteria = OscillationCriteria()
    literal_spiral: bool = False

    def __post_init__(self):
        if self.hole_threshold <= 0:
            raise ValueError("hole threshold must be positive")
        if not 0 < self.tilt <= 45:
            raise ValueError("tilt must be in (0, 45] degrees")
        for name in ("approach_speed", "move_speed", "tilt_rate", "ramp_slope",
                     "state_timeout", "depth_done", "force_limit"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Transition:
    t: float
    source: AssemblyState
    target: AssemblyState
    reason: str


@dataclass(frozen=True)
class StrategyOutput:
    frame: HybridFrame
    tilt: float  # commanded tilt, deg


class OscillationMonitor:
    """Tracks chains of large alternating tracking-error excursions per axis."""

    def __init__(self, criteria: OscillationCriteria, dt: float = SAMPLE_PERIOD):
        self.c = criteria
        self._n = max(1, int(round(criteria.smoothing / dt)))
        self.reset()

    def reset(self):
        self._hist = [deque(maxlen=self._n) for _ in range(3)]
        self._sign = [0, 0, 0]
        self._start: list[Optional[float]] = [None, None, None]
        self._last: list[Optional[float]] = [None, None, None]
        self.peak = 0.0  # longest chain (s) since the last reset

    def update(self, t: float, errors) -> bool:
        """Feed one sample of per-axis errors (nan for axes not force controlled)."""
        hit = False
        for i, e in enumerate(errors):
            if not np.isfinite(e):
                self._hist[i].clear()
                self._sign[i] = 0
                self._start[i] = self._last[i] = None
                continue
            h = self._hist[i]
            h.append(float(e))
            if len(h) < self._n:
                continue
            e = math.fsum(h) / self._n
            if abs(e) < self.c.amplitude:
                continue
            s = 1 if e > 0 else -1
            if self._sign[i] and s != self._sign[i]:
                last = self._last[i]
                if last is None or t - last > self.c.max_gap:
                    self._start[i] = t
                self._last[i] = t
                length = t - self._start[i]
                self.peak = max(self.peak, length)
                hit = hit or length >= self.c.duration
            self._sign[i] = s
        return hit


class Strategy:
    """Runs the staged assembly; call :meth:`advance` once per sample."""

    def __init__(self, params: StrategyParams, start_xy, surface_z: float = 0.0,
                 dt: float = SAMPLE_PERIOD):
        self.p = params
        self.dt = dt
        self.state = AssemblyState.I
        self.fail_reason: Optional[str] = None
        self.t = 0.0
        self.t_state = 0.0
        self.events: list[Transition] = []
        self.start_xy = (float(start_xy[0]), float(start_xy[1]))
        self.approach_z = surface_z + params.approach_height
        self.z_cmd = self.approach_z
        self.tilt_cmd = params.tilt
        self.xy_cmd = np.array(self.start_xy)
        self.spiral: Optional[SpiralState] = None
        self.detector = HoleDetector(params.hole_threshold)
        self.target_xy: Optional[np.ndarray] = None
        self.surface_estimate: Optional[float] = None
        self.first_contact_t: Optional[float] = None
        self.x_released = False
        self.x_hold: Optional[float] = None
        self._F: list = []
        self._P: list = []
        self.monitor = OscillationMonitor(params.oscillation, dt)
        self._last: Optional[StrategyOutput] = None

    # bookkeeping
    def _go(self, target: AssemblyState, reason: str):
        self.events.append(Transition(self.t, self.state, target, reason))
        self.state = target
        self.t_state = 0.0
        self._F.clear()
        self._P.clear()
        self.monitor.reset()

    def fail(self, reason: str):
        if self.state not in (AssemblyState.FAILED, AssemblyState.VIII):
            self.fail_reason = reason
            self._go(AssemblyState.FAILED, reason)

    @property
    def finished(self) -> bool:
        return self.state in (AssemblyState.VIII, AssemblyState.FAILED)

    def _steady(self) -> bool:
        return steady_state_reached(self._F, self._P, self.dt, self.p.steady)

    def _remember(self, frame):
        n = int(round(self.p.steady.window / self.dt)) + 1
        self._F.append(frame.force)
        self._P.append(frame.position)
        if len(self._F) > n:
            del self._F[0]
            del self._P[0]

    def initial_output(self) -> StrategyOutput:
        return StrategyOutput(self._frame_I(), self.tilt_cmd)

    def _frame_I(self):
        return HybridFrame((Position(self.xy_cmd[0]), Position(self.xy_cmd[1]),
                            Position(self.z_cmd)))

    def advance(self, frame) -> StrategyOutput:
        """Consume one delayed sensor frame and emit this sample's command frame."""
        p, dt = self.p, self.dt
        if frame is not None and not self.finished:
            if not (np.all(np.isfinite(frame.force)) and np.all(np.isfinite(frame.position))):
                self.fail("nonfinite")
            elif float(np.linalg.norm(frame.force)) > p.force_limit:
                self.fail("overforce")
            elif self.t_state > p.state_timeout:
                self.fail("timeout")
            elif self._oscillating(frame):
                self.fail("instability")
        out = self._dispatch(frame)
        self._last = out
        self.t += dt
        self.t_state += dt
        return out

    def tracking_errors(self, frame) -> np.ndarray:
        """Measured minus commanded force on each force-controlled axis of the last frame."""
        err = np.full(3, np.nan)
        if self._last is None:
            return err
        hf = self._last.frame
        meas = frame.wrench if hf.frame == WRENCH else frame.force
        for i, m in enumerate(hf.modes):
            if isinstance(m, Force):
                err[i] = meas[i] - m.setpoint
            elif isinstance(m, Ramp):
                err[i] = meas[i] - m.setpoint(self.t_state)
        return err

    def _oscillating(self, frame) -> bool:
        S = AssemblyState
        if self.state not in (S.II, S.III, S.IV, S.V, S.VI, S.VII):
            return False
        return self.monitor.update(self.t, self.tracking_errors(frame))

    def _x_mode(self, setpoint=0.0):
        """x leaves force control once released and holds its settled position."""
        if not self.x_released:
            return Force(setpoint)
        return Off() if self.x_hold is None else Position(self.x_hold)

    def _dispatch(self, frame) -> StrategyOutput:
        p, dt, S = self.p, self.dt, AssemblyState
        st = self.state
        if frame is not None:
            self._remember(frame)

        if st is S.I:
            if frame is not None and frame.force[2] > p.contact_force:
                self.first_contact_t = self.t
                self.spiral = SpiralState(tuple(self.xy_cmd), p.pitch, v_max=p.speed.v_max,
                                          literal=p.literal_spiral)
                self._go(S.II, "first contact")
                return self._dispatch_search(frame)
            self.z_cmd -= p.approach_speed * dt
            return StrategyOutput(self._frame_I(), self.tilt_cmd)

        if st is S.II:
            return self._dispatch_search(frame)

        if st is S.III:
            d = self.target_xy - self.xy_cmd
            dist = float(np.linalg.norm(d))
            step = p.move_speed * dt
            if dist <= step:
                self.xy_cmd = self.target_xy.copy()
                self._go(S.IV, "at hole")
                return self._dispatch(None)
            self.xy_cmd = self.xy_cmd + d * (step / dist)
            return StrategyOutput(HybridFrame((Position(self.xy_cmd[0]), Position(self.xy_cmd[1]),
                                               Force(p.search_force))), self.tilt_cmd)

        if st is S.IV:
            if frame is not None and self._steady():
                self.x_released = True
                # the mean over the steady window, not the last noisy command
                self.x_hold = float(np.mean([q[0] for q in self._P]))
                self._go(S.V, "steady two-point contact")
                return self._dispatch(None)
            return StrategyOutput(HybridFrame((Force(0.0), Off(), Force(p.two_point_force))),
                                  self.tilt_cmd)

        if st is S.V:
            if frame is not None and self._steady():
                self._go(S.VI, "steady three-point contact")
                return self._dispatch(None)
            w = p.three_point_wrench
            return StrategyOutput(HybridFrame((self._x_mode(w[0]), Force(w[1]), Force(w[2])),
                                              WRENCH), self.tilt_cmd)

        if st is S.VI:
            self.tilt_cmd = max(0.0, self.tilt_cmd - p.tilt_rate * dt)
            if self.tilt_cmd <= 0.0 and frame is not None and self._steady():
                self._go(S.VII, "aligned")
                return self._dispatch(None)
            fy, fz = p.tilt_force
            return StrategyOutput(HybridFrame((self._x_mode(), Force(fy), Force(fz))),
                                  self.tilt_cmd)

        if st is S.VII:
            if frame is not None and self.insertion_depth(frame) >= p.depth_done:
                self._go(S.VIII, "inserted")
                return self._dispatch(None)
            return StrategyOutput(HybridFrame((self._x_mode(), Force(0.0),
                                               Ramp(p.insert_force, p.ramp_slope))),
                                  self.tilt_cmd)

        # VIII and FAILED hold the last command
        return StrategyOutput(HybridFrame((Off(), Off(), Off())), self.tilt_cmd)

    def _dispatch_search(self, frame) -> StrategyOutput:
        p, dt = self.p, self.dt
        sp = self.spiral
        if frame is not None:
            fz = float(frame.force[2])
            v = modulate_speed(fz, sp.v, dt, p.speed)
            if p.lateral_guard > 0 and math.hypot(frame.force[0], frame.force[1]) > p.lateral_guard:
                v = max(0.0, sp.v - p.speed.accel * dt)
            sp.v = v
            if self.t_state > 0:
                if detect_hole(self.detector, float(frame.position[2]), frame.position[:2]):
                    self.surface_estimate = self.detector.max_pz
                    self.target_xy = np.array(self.detector.argmin_xy)
                    self._go(AssemblyState.III, "hole detected")
                    return self._dispatch(None)
        self.xy_cmd = np.array(spiral_step(sp, dt))
        return StrategyOutput(HybridFrame((Position(self.xy_cmd[0]), Position(self.xy_cmd[1]),
                                           Force(p.search_force))), self.tilt_cmd)

    def insertion_depth(self, frame) -> float:
        ref = self.surface_estimate if self.surface_estimate is not None else 0.0
        return ref - float(frame.position[2])
