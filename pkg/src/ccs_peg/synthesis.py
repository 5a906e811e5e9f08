"""Convex force-controller synthesis over a stable FIR Youla parameter.

The force loop is cast as a generalized plant

    z = f_err = f_ref - f,    y = f_err,    f = G u,

with G = stiffness * inner_loop * sensor_delay.  Because G is stable, every
stabilizing controller is K = Q (I + P22 Q)^-1 for a stable Q and the
closed loop H = P11 + P12 Q P21 is affine in Q.  With Q restricted to FIR
taps, tracking and robust-stability requirements become linear constraints
and the whole design is a single linear program.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from . import lti
from .lti import DiscreteLti

log = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    pass


class SynthesisInfeasible(SynthesisError):
    """The linear program has no solution; ``binding`` names the culprits."""

    def __init__(self, message: str, binding: Sequence[str]):
        super().__init__(message)
        self.binding = list(binding)


class CertificateFailure(SynthesisError):
    """A posteriori check found an unstable stiffness."""

    def __init__(self, message: str, stiffness: float, radius: float):
        super().__init__(message)
        self.stiffness = stiffness
        self.radius = radius


@dataclass(frozen=True)
class ContactPlantModel:
    inner_loop: DiscreteLti
    stiffness: float  # N/mm
    sensor_delay_steps: int = 1

    def __post_init__(self):
        if not self.stiffness > 0:
            raise ValueError(f"stiffness must be positive, got {self.stiffness}")
        if self.sensor_delay_steps < 0:
            raise ValueError("sensor delay must be >= 0")
        if not lti.is_stable(self.inner_loop):
            raise ValueError("inner position loop must be stable")

    def with_stiffness(self, k: float) -> "ContactPlantModel":
        return ContactPlantModel(self.inner_loop, k, self.sensor_delay_steps)

    def force_map(self) -> DiscreteLti:
        """u (commanded position, mm) -> measured contact force (N)."""
        return lti.series(self.inner_loop, lti.delay(self.sensor_delay_steps, self.inner_loop.dt),
                          lti.gain(self.stiffness, self.inner_loop.dt))


def inner_loop_model(natural_freq_hz: float = 4.0, damping: float = 0.8,
                     transport_delay_steps: int = 1,
                     dt: float = lti.SAMPLE_PERIOD) -> DiscreteLti:
    """Robot position loop: second-order lag followed by a transport delay."""
    return lti.series(lti.second_order_lag(natural_freq_hz, damping, dt),
                      lti.delay(transport_delay_steps, dt))


@dataclass(frozen=True)
class GeneralizedPlant:
    P11: DiscreteLti
    P12: DiscreteLti
    P21: DiscreteLti
    P22: DiscreteLti
    stiffness: float

    @property
    def dt(self) -> float:
        return self.P22.dt


def build_plant(model: ContactPlantModel) -> GeneralizedPlant:
    dt = model.inner_loop.dt
    G = model.force_map()
    if abs(G.D[0, 0]) > 0:
        raise ValueError("force map must be strictly proper")
    one = lti.identity(dt)
    return GeneralizedPlant(P11=one, P12=-G, P21=one, P22=-G, stiffness=model.stiffness)


def closed_loop(plant: GeneralizedPlant, k_ctrl: DiscreteLti) -> DiscreteLti:
    """H = P11 + P12 K (I - P22 K)^-1 P21 (f_ref -> f_err)."""
    # u = K (P21 w + P22 u), realized as one loop so K's states appear once
    u_of_w = lti.series(plant.P21, lti.feedback_pair(k_ctrl, plant.P22, sign=+1.0))
    return lti.parallel(plant.P11, lti.series(u_of_w, plant.P12))


def closed_loop_affine_maps(plant: GeneralizedPlant) -> tuple[DiscreteLti, DiscreteLti]:
    """(T1, T2) with H = T1 + T2 Q for every stable Q."""
    if not lti.is_stable(plant.P22):
        raise ValueError("P22 is unstable; coprime factorization is not supported")
    return plant.P11, lti.series(plant.P21, plant.P12)


def q_to_controller(q, plant: GeneralizedPlant) -> DiscreteLti:
    """K = Q (I + P22 Q)^-1."""
    Q = q if isinstance(q, DiscreteLti) else lti.fir(q, plant.dt)
    if not lti.is_stable(plant.P22):
        raise ValueError("P22 is unstable")
    return lti.feedback_pair(Q, plant.P22, sign=-1.0)


def controller_to_q(k_ctrl: DiscreteLti, plant: GeneralizedPlant) -> DiscreteLti:
    """Q = K (I - P22 K)^-1, the inverse of :func:`q_to_controller`."""
    return lti.feedback_pair(k_ctrl, plant.P22, sign=+1.0)


@dataclass(frozen=True)
class SynthesisSpec:
    nominal_stiffness: float = 10.0
    target_time_constant: float = 0.17
    robust_interval: tuple[float, float] = (10.0, 100.0)
    q_taps: int = 64
    freq_grid_size: int = 200
    freq_band_hz: tuple[float, float] = (0.05, 62.5)
    step_horizon: int = 250
    tracking_band: float = 0.05
    stiffness_margin: float = 1.1
    sector_margin: float = 0.0
    free_space_stable: bool = True
    verify_points: int = 19
    effort_limit: Optional[float] = 0.2  # bound on |Q| (mm/N) above effort_corner_hz
    effort_corner_hz: float = 10.0
    polygon_sides: int = 16
    dt: float = lti.SAMPLE_PERIOD
    target_step: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        kmin, kmax = self.robust_interval
        if not (0 < kmin <= self.nominal_stiffness <= kmax):
            raise ValueError("need 0 < k_min <= nominal_stiffness <= k_max")
        if self.q_taps < 8:
            raise ValueError("q_taps must be >= 8")
        if self.step_horizon * self.dt < 5 * self.target_time_constant - 1e-12:
            raise ValueError("step horizon must cover at least 5 time constants")
        if self.target_step is not None and len(self.target_step) != self.step_horizon:
            raise ValueError("target_step length must equal step_horizon")
        if self.stiffness_margin < 1.0:
            raise ValueError("stiffness_margin must be >= 1")

    def target(self) -> np.ndarray:
        if self.target_step is not None:
            return np.asarray(self.target_step, dtype=float)
        t = np.arange(self.step_horizon) * self.dt
        return 1.0 - np.exp(-t / self.target_time_constant)

    def frequency_grid(self) -> np.ndarray:
        lo, hi = self.freq_band_hz
        hi = min(hi, 0.5 / self.dt)
        return 2.0 * np.pi * np.logspace(np.log10(lo), np.log10(hi), self.freq_grid_size)

    def verification_grid(self) -> np.ndarray:
        kmin, kmax = self.robust_interval
        if kmin == kmax:
            return np.array([kmin])
        return np.linspace(kmin, kmax, max(self.verify_points, 2))


@dataclass(frozen=True, eq=False)
class SynthesizedController:
    q: np.ndarray
    controller: DiscreteLti
    certificate: list[tuple[float, float]]
    achieved_cost: float
    internal_model: DiscreteLti  # nominal u -> f map used by the IMC realization
    nominal_stiffness: float = 10.0
    predicted_step: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def dt(self) -> float:
        return self.controller.dt

    def to_json(self) -> dict:
        K = self.controller
        M = self.internal_model
        return {
            "sample_period": K.dt,
            "q_taps": [float(v) for v in self.q],
            "controller_state_space": _ss_json(K),
            "certificate": [{"stiffness": float(k), "spectral_radius": float(r)}
                            for k, r in self.certificate],
            "achieved_cost": float(self.achieved_cost),
            "nominal_stiffness": float(self.nominal_stiffness),
            "internal_model": _ss_json(M),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, doc: dict) -> "SynthesizedController":
        dt = float(doc["sample_period"])
        K = _ss_from_json(doc["controller_state_space"], dt)
        q = np.asarray(doc["q_taps"], dtype=float)
        M = doc.get("internal_model")
        model = _ss_from_json(M, dt) if M is not None else None
        cert = [(float(c["stiffness"]), float(c["spectral_radius"])) for c in doc["certificate"]]
        return cls(q=q, controller=K, certificate=cert,
                   achieved_cost=float(doc.get("achieved_cost", float("nan"))),
                   internal_model=model,
                   nominal_stiffness=float(doc.get("nominal_stiffness", 10.0)))

    @classmethod
    def load(cls, path) -> "SynthesizedController":
        return cls.from_json(json.loads(Path(path).read_text()))


def _ss_json(sys: DiscreteLti) -> dict:
    return {k: getattr(sys, k).tolist() for k in ("A", "B", "C", "D")}


def _ss_from_json(doc: dict, dt: float) -> DiscreteLti:
    D = np.atleast_2d(np.asarray(doc["D"], dtype=float))
    p, m = D.shape
    A = np.asarray(doc["A"], dtype=float)
    n = A.shape[0] if A.size else 0
    B = np.asarray(doc["B"], dtype=float).reshape(n, m)
    C = np.asarray(doc["C"], dtype=float).reshape(p, n)
    return DiscreteLti(A.reshape(n, n), B, C, D, dt)


def _toeplitz_step(g_step: np.ndarray, horizon: int, n_taps: int) -> np.ndarray:
    S = np.zeros((horizon, n_taps))
    for j in range(n_taps):
        S[j:, j] = g_step[: horizon - j]
    return S


def _delay_matrix(grid: np.ndarray, n_taps: int, dt: float) -> np.ndarray:
    return np.exp(-1j * np.outer(grid * dt, np.arange(n_taps)))


def _polygon_rows(F: np.ndarray, sides: int) -> np.ndarray:
    """Rows of Re(e^{-j 2 pi m / sides} F q) for each grid row of F and each m.

    Bounding all of them by c cos(pi/sides) keeps |F q| <= c: the inscribed
    polygon is contained in the disk of radius c.
    """
    rot = np.exp(-2j * np.pi * np.arange(sides) / sides)
    return (rot[None, :, None] * F[:, None, :]).real.reshape(-1, F.shape[1])


def synthesize(spec: SynthesisSpec, family: Sequence[ContactPlantModel]) -> SynthesizedController:
    """Solve the tracking LP and certify robust stability over the family.

    Minimizes sum_n |s[n] - r[n]| where s is the nominal step response of
    T = G_nom Q and r the first-order target, subject to

    * |s[n] - r[n]| <= tracking_band for n >= 3 tau,
    * T(1) = 1 (zero steady-state force error),
    * Re(1 + (G_k - G_nom) Q) >= sector_margin on the frequency grid for
      every family member and for the stiffest member scaled by
      ``stiffness_margin``; this keeps 1 + G_k K free of zeros outside the
      unit disk, i.e. the loop closed on G_k stable,
    * optionally Re(1 - T) >= 0 so that K has no unstable poles other
      than the integrator (safe when contact is lost).
    """
    nominal = [m for m in family if np.isclose(m.stiffness, spec.nominal_stiffness)]
    if not nominal:
        raise ValueError("family must contain the nominal stiffness model")
    nom = nominal[0]
    dt = spec.dt
    G_nom = nom.force_map()
    H, nq = spec.step_horizon, spec.q_taps

    g_step = np.cumsum(G_nom.impulse(H))
    S = _toeplitz_step(g_step, H, nq)
    r = spec.target()
    grid = spec.frequency_grid()
    E = _delay_matrix(grid, nq, dt)
    G_nom_w = lti.freq_response(G_nom, grid).values

    # robust rows:  -Re((G_k - G_nom) e^{-jwn dt}) q <= 1 - eps
    deltas = []
    kmax_model = max(family, key=lambda m: m.stiffness)
    for m in family:
        if m is nom:
            continue
        deltas.append(lti.freq_response(m.force_map(), grid).values - G_nom_w)
    ext = kmax_model.with_stiffness(kmax_model.stiffness * spec.stiffness_margin)
    deltas.append(lti.freq_response(ext.force_map(), grid).values - G_nom_w)
    if spec.robust_interval[1] > kmax_model.stiffness:
        top = nom.with_stiffness(spec.robust_interval[1] * spec.stiffness_margin)
        deltas.append(lti.freq_response(top.force_map(), grid).values - G_nom_w)

    zero_e = lambda rows: np.zeros((rows, H))  # noqa: E731
    n3 = int(np.ceil(3 * spec.target_time_constant / dt))
    n3 = min(n3, H)
    families = {}
    families["tracking_cost"] = (np.vstack([np.hstack([S, -np.eye(H)]),
                                            np.hstack([-S, -np.eye(H)])]),
                                 np.concatenate([r, -r]))
    band = spec.tracking_band
    families["tracking_band"] = (np.vstack([np.hstack([S[n3:], zero_e(H - n3)]),
                                            np.hstack([-S[n3:], zero_e(H - n3)])]),
                                 np.concatenate([r[n3:] + band, -(r[n3:] - band)]))
    rob = [-(d[:, None] * E).real for d in deltas]
    if rob:
        Rm = np.vstack(rob)
        families["robust_stability"] = (np.hstack([Rm, zero_e(Rm.shape[0])]),
                                        np.full(Rm.shape[0], 1.0 - spec.sector_margin))
    if spec.effort_limit is not None:
        hf = grid >= 2 * np.pi * spec.effort_corner_hz
        if hf.any():
            M = _polygon_rows(E[hf], spec.polygon_sides)
            bound = spec.effort_limit * np.cos(np.pi / spec.polygon_sides)
            families["control_effort"] = (np.hstack([M, zero_e(M.shape[0])]),
                                          np.full(M.shape[0], bound))
    if spec.free_space_stable:
        Tm = (G_nom_w[:, None] * E).real
        families["free_space"] = (np.hstack([Tm, zero_e(len(grid))]), np.ones(len(grid)))
    A_eq = np.hstack([np.full((1, nq), G_nom.dcgain()[0, 0]),
                      np.zeros((1, H))])
    b_eq = np.array([1.0])
    cost = np.concatenate([np.zeros(nq), np.ones(H)])
    bounds = [(None, None)] * nq + [(0, None)] * H

    def solve(names):
        A_ub = np.vstack([families[n][0] for n in names])
        b_ub = np.concatenate([families[n][1] for n in names])
        return linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                       bounds=bounds, method="highs")

    res = solve(list(families))
    if res.status == 2:
        binding = []
        for name in families:
            if name == "tracking_cost":
                continue
            if solve(["tracking_cost", name]).status == 2:
                binding.append(name)
        if not binding:
            binding = [n for n in families if n != "tracking_cost"]
        raise SynthesisInfeasible(
            f"synthesis LP infeasible; binding constraint families: {', '.join(binding)}",
            binding)
    if res.status != 0:
        raise SynthesisError(f"LP solver failed: {res.message}")

    q = res.x[:nq].copy()
    plant_nom = build_plant(nom)
    K = q_to_controller(q, plant_nom)
    certificate = certify(K, nom, spec.verification_grid(), family)
    for k, rho in certificate:
        if rho >= 1.0:
            raise CertificateFailure(
                f"closed loop unstable at stiffness {k:g} N/mm (spectral radius {rho:.6f})",
                k, rho)
    achieved = float(np.sum(np.abs(S @ q - r)))
    log.info("synthesized %d-tap Q, cost %.6f", nq, achieved)
    return SynthesizedController(q=q, controller=K, certificate=certificate,
                                 achieved_cost=achieved, internal_model=G_nom,
                                 nominal_stiffness=nom.stiffness, predicted_step=S @ q)


def certify(k_ctrl: DiscreteLti, nominal: ContactPlantModel, stiffnesses,
            family: Sequence[ContactPlantModel] = ()) -> list[tuple[float, float]]:
    """Spectral radius of the closed loop at each stiffness, sorted by stiffness."""
    models = {float(k): nominal.with_stiffness(float(k)) for k in stiffnesses}
    for m in family:
        models.setdefault(float(m.stiffness), m)
    out = []
    for k in sorted(models):
        H = closed_loop(build_plant(models[k]), k_ctrl)
        out.append((k, lti.spectral_radius(H)))
    return out


def default_family(inner_loop: DiscreteLti, sensor_delay_steps: int = 1,
                   stiffnesses=None) -> list[ContactPlantModel]:
    if stiffnesses is None:
        stiffnesses = np.arange(10.0, 100.0 + 1e-9, 5.0)
    return [ContactPlantModel(inner_loop, float(k), sensor_delay_steps) for k in stiffnesses]


def step_response(sys: DiscreteLti, n: int, amplitude: float = 1.0) -> np.ndarray:
    return lti.simulate(sys, np.full(n, amplitude))


def rise_time_63(step: np.ndarray, dt: float, final: float = 1.0) -> float:
    """First time the response crosses 63.2 % of ``final`` (linear interpolation)."""
    level = 0.632 * final
    idx = np.nonzero(step >= level)[0]
    if idx.size == 0:
        return float("inf")
    i = int(idx[0])
    if i == 0:
        return 0.0
    frac = (level - step[i - 1]) / (step[i] - step[i - 1])
    return (i - 1 + frac) * dt
