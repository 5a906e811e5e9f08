"""Quasi-static peg-in-hole contact world.

The block occupies z <= 0 outside a vertical cylindrical hole of radius
``hole_radius`` and depth ``hole_depth`` centred at ``hole_center``.  The peg
is a rigid cylinder tilted about the world x axis by ``tilt`` degrees; its
axis points along a = (0, sin(tilt), cos(tilt)) from the bottom face to
the top.  The peg pose is given by its reference point P, the lowest point
of the bottom rim, and the tilt.

Contact is resolved with penalty springs on two sampled edge sets: points of
the hole rim tested against the peg solid, and points of the peg's bottom
rim tested against the block.  Each contiguous run of penetrating samples
becomes one contact whose depth and normal are arc-length weighted averages,
so the resultant force varies continuously as runs change shape.

Friction is a lumped elasto-plastic stick/slip element acting in the plane
tangent to the resultant normal.  Only samples pressing a flat face carry
it; a sample where two edges cross is frictionless, because a sharp edge
riding on another edge offers no face for the tangential load to bear on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from . import lti
from .controllers import wrench_rotation
from .synthesis import inner_loop_model


class SimulationBlowup(RuntimeError):
    pass


@dataclass(frozen=True)
class Geometry:
    peg_radius: float = 14.9415
    hole_radius: float = 15.0
    peg_length: float = 40.0
    hole_depth: float = 20.0
    hole_center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.hole_radius > self.peg_radius > 0:
            raise ValueError("need hole_radius > peg_radius > 0")
        c = self.clearance
        if not 0.065 - 1e-12 <= c <= 0.169 + 1e-12:
            raise ValueError(f"diametral clearance {c:.4f} mm outside [0.065, 0.169]")
        if self.peg_length <= 0 or self.hole_depth <= 0:
            raise ValueError("peg length and hole depth must be positive")

    @property
    def clearance(self) -> float:
        return 2.0 * (self.hole_radius - self.peg_radius)


@dataclass(frozen=True)
class Material:
    name: str
    stiffness: float  # N/mm
    mu_s: float
    mu_k: float
    stick_dwell: float = 0.05  # s

    def __post_init__(self):
        if not self.stiffness > 0:
            raise ValueError("stiffness must be positive")
        if not self.mu_s >= self.mu_k >= 0:
            raise ValueError("need mu_s >= mu_k >= 0")
        if self.stick_dwell <= 0:
            raise ValueError("stick_dwell must be positive")


MATERIALS = {
    "rubber": Material("rubber", 10.0, 1.2, 0.9),
    "abs": Material("abs", 50.0, 0.5, 0.4),
    "pine": Material("pine", 65.0, 0.6, 0.45),
    "aluminum": Material("aluminum", 100.0, 0.4, 0.3),
}


class ContactMode(str, Enum):
    FREE = "Free"
    POINT_ON_PLANE = "PointOnPlane"
    RIM_POINT = "RimPoint"
    TWO_POINT = "TwoPoint"
    THREE_POINT = "ThreePoint"
    INSERTED = "Inserted"


@dataclass(frozen=True)
class WorldConfig:
    geometry: Geometry = Geometry()
    inner_natural_freq_hz: float = 4.0
    inner_damping: float = 0.8
    transport_delay_steps: int = 1
    sensor_delay_steps: int = 1
    sigma_force: float = 0.1  # N
    sigma_position: float = 0.02  # mm
    x_force_noise: float = 0.3  # N, extra x-axis noise
    x_force_noise_enabled: bool = True
    tangential_stiffness_ratio: float = 0.5
    stick_velocity: float = 0.1  # mm/s
    max_penetration: float = 5.0  # mm
    rim_samples: int = 360
    edge_samples: int = 180
    dt: float = lti.SAMPLE_PERIOD

    def inner_loop(self) -> lti.DiscreteLti:
        return inner_loop_model(self.inner_natural_freq_hz, self.inner_damping,
                                self.transport_delay_steps, self.dt)


@dataclass
class WorldState:
    position: np.ndarray  # P, mm, world frame (z up)
    tilt: float  # deg
    contact_mode: ContactMode = ContactMode.FREE
    penetrations: tuple = ()
    stuck: bool = True
    time: float = 0.0


@dataclass(frozen=True)
class SensorFrame:
    t: float
    force: np.ndarray  # F^c: force on the environment, z down
    wrench: np.ndarray  # F^w: F^c resolved in the tool frame
    position: np.ndarray  # P, world frame
    tilt: float  # deg, tool orientation reported by the robot


# -- peg geometry ---------------------------------------------------------------

def peg_axes(tilt_deg: float):
    th = math.radians(tilt_deg)
    s, c = math.sin(th), math.cos(th)
    a = np.array([0.0, s, c])
    e1 = np.array([1.0, 0.0, 0.0])
    e2 = np.array([0.0, c, -s])
    return a, e1, e2


def bottom_center(P, tilt_deg: float, radius: float) -> np.ndarray:
    _, _, e2 = peg_axes(tilt_deg)
    return np.asarray(P, dtype=float) - radius * e2


def underside_height(g: Geometry, tilt_deg: float, dx, dy):
    """Height of the peg's lower surface above P at horizontal offset (dx, dy).

    ``inf`` where a vertical line through the offset misses the peg.
    """
    R, L = g.peg_radius, g.peg_length
    th = math.radians(tilt_deg)
    s, c = math.sin(th), math.cos(th)
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    u = np.clip(dx / R, -1.0, 1.0)
    w = R * c * np.sqrt(1.0 - u * u)
    rel = dy + R * c
    h = -dy * math.tan(th)
    out = np.full(np.broadcast(dx, dy).shape, np.inf)
    disk = (np.abs(dx) <= R) & (np.abs(rel) <= w)
    out = np.where(disk, h, out)
    if s > 1e-12:
        t = (rel - w) / s
        side = (np.abs(dx) <= R) & (rel > w) & (t <= L)
        out = np.where(side, h + t / c, out)
    return out if out.shape else float(out)


def depth_profile(g: Geometry, tilt: float, x: float, y: float, n_scan: int = 720) -> float:
    """Resting height of P when the peg is lowered onto the block at (x, y).

    Zero when P is over the plane; negative over the hole, capped at the
    hole floor.  The underside height is convex, so the supporting rim point
    is found by a dense angular scan refined with golden-section search.
    """
    if not 0.0 <= tilt <= 45.0:
        raise ValueError("tilt must be in [0, 45] degrees")
    xh, yh = g.hole_center
    Rh = g.hole_radius
    if math.hypot(x - xh, y - yh) >= Rh:
        return 0.0

    def h_at(phi):
        return underside_height(g, tilt, xh + Rh * np.cos(phi) - x, yh + Rh * np.sin(phi) - y)

    phis = np.linspace(0.0, 2 * math.pi, n_scan, endpoint=False)
    hs = h_at(phis)
    if not np.any(np.isfinite(hs)):
        return -g.hole_depth
    best = float(np.min(hs))
    step = 2 * math.pi / n_scan
    gr = (math.sqrt(5) - 1) / 2
    for i in np.argsort(hs)[:3]:
        if not np.isfinite(hs[i]):
            continue
        lo, hi = phis[i] - step, phis[i] + step
        a_, b_ = hi - gr * (hi - lo), lo + gr * (hi - lo)
        fa, fb = float(h_at(a_)), float(h_at(b_))
        for _ in range(40):
            if fa < fb:
                hi, b_, fb = b_, a_, fa
                a_ = hi - gr * (hi - lo)
                fa = float(h_at(a_))
            else:
                lo, a_, fa = a_, b_, fb
                b_ = lo + gr * (hi - lo)
                fb = float(h_at(b_))
        best = min(best, fa, fb)
    return max(-best, -g.hole_depth)


# -- contact resolution -----------------------------------------------------------

@dataclass(frozen=True)
class ContactPoint:
    """One run of penetrating samples along an edge.

    ``weight`` is the penetrated area of the run (sum of depth times arc
    length), ``moment`` the depth-weighted sum of sample normals over that
    area and ``friction_moment`` the part of it carried by flat-face
    contact, which alone supports friction.
    """
    point: np.ndarray  # deepest sample
    depth: float  # effective depth: CAP_FACTOR * sum(d^2 ds) / sum(d ds)
    normal: np.ndarray  # direction the block pushes the peg
    source: str  # "rim" (hole rim samples) or "edge" (peg edge samples)
    weight: float = 0.0
    moment: np.ndarray = field(default_factory=lambda: np.zeros(3))
    friction_moment: np.ndarray = field(default_factory=lambda: np.zeros(3))
    peak: float = 0.0  # deepest sample depth


def _runs(mask: np.ndarray):
    """Index arrays of maximal cyclic runs of True in ``mask``."""
    n = len(mask)
    if not mask.any():
        return []
    if mask.all():
        return [np.arange(n)]
    start = int(np.argmin(mask))  # first False; rotate so no run wraps
    idx = (np.arange(n) + start) % n
    m = mask[idx]
    d = np.diff(np.concatenate([[0], m.astype(np.int8), [0]]))
    begins = np.nonzero(d == 1)[0]
    ends = np.nonzero(d == -1)[0]
    return [idx[b:e] for b, e in zip(begins, ends)]


def _chamfer(d1, n1, d2, n2, mask):
    """Exit depth and direction below the chamfer joining two face exits.

    A point at depth d1 under face 1 and d2 under face 2 lies
    d1 d2 / sqrt(d1^2 + d2^2) under the plane through d1 n1 and d2 n2, whose
    normal is along n1 / d1 + n2 / d2.  This reduces to the nearer face when
    the other is far and blends smoothly across an edge, approximating the
    common normal of an edge-on-edge contact.
    """
    d1 = np.where(mask, d1, 1.0)
    d2 = np.where(mask, d2, 1.0)
    d1 = np.maximum(d1, 1e-12)
    d2 = np.maximum(d2, 1e-12)
    inv1, inv2 = 1.0 / d1, 1.0 / d2
    depth = 1.0 / np.sqrt(inv1 * inv1 + inv2 * inv2)
    n = n1 * inv1[:, None] + n2 * inv2[:, None]
    n /= np.linalg.norm(n, axis=1)[:, None]
    return np.where(mask, depth, 0.0), n


def face_share(d1, d2):
    """Fraction of a sample's load that is flat-face contact.

    When one exit is much nearer than the other the sample sits under a
    single flat face; when the exits are comparable it sits under the
    crossing of two edges, where the tangent plane is ill-defined and no
    friction is applied.  The share ramps linearly in the depth ratio.
    """
    lo, hi = np.minimum(d1, d2), np.maximum(d1, d2)
    ratio = hi / np.maximum(lo, 1e-12)
    return np.clip((ratio - EDGE_RATIO) / (FACE_RATIO - EDGE_RATIO), 0.0, 1.0)


def _run_contacts(points, mask, depth, normals, share, ds, source):
    """Collapse each run of penetrating samples into one ContactPoint.

    Every sample contributes in proportion to its depth, so the totals
    change continuously as samples enter or leave a run and as runs merge
    or split.
    """
    out = []
    for run in _runs(mask):
        d = depth[run]
        w = d * ds
        weight = float(w.sum())
        if weight <= 0.0:
            continue
        moment = (w * d) @ normals[run]
        fmoment = (w * d * share[run]) @ normals[run]
        norm = float(np.linalg.norm(moment))
        i = run[int(np.argmax(d))]
        n = moment / norm if norm > 0 else normals[i].copy()
        out.append(ContactPoint(points[i].copy(), CAP_FACTOR * float((w * d).sum() / weight),
                                n, source, weight, CAP_FACTOR * moment,
                                CAP_FACTOR * fmoment, float(depth[i])))
    return out


EDGE_RATIO = 2.0
FACE_RATIO = 6.0
# sum(d^2) / sum(d) over a parabolic depth profile is 4/5 of its peak; the
# factor restores the peak so that a single contact is loaded at k * peak
CAP_FACTOR = 1.25


class ContactGeometry:
    """Sampled edge sets and the penetration queries on them."""

    def __init__(self, g: Geometry, rim_samples: int = 360, edge_samples: int = 180):
        self.g = g
        phi = np.linspace(0.0, 2 * math.pi, rim_samples, endpoint=False)
        xh, yh = g.hole_center
        self.rim = np.stack([xh + g.hole_radius * np.cos(phi),
                             yh + g.hole_radius * np.sin(phi),
                             np.zeros_like(phi)], axis=1)
        self._rim_ds = 2 * math.pi * g.hole_radius / rim_samples
        psi = np.linspace(0.0, 2 * math.pi, edge_samples, endpoint=False)
        self._edge_ds = 2 * math.pi * g.peg_radius / edge_samples
        self._cos_psi = np.cos(psi)
        self._sin_psi = np.sin(psi)

    def peg_edge(self, P, tilt):
        _, e1, e2 = peg_axes(tilt)
        c = bottom_center(P, tilt, self.g.peg_radius)
        R = self.g.peg_radius
        # psi = 0 is P itself (the lowest point)
        return c + R * (np.outer(self._sin_psi, e1) + np.outer(self._cos_psi, e2))

    def rim_contacts(self, P, tilt) -> list[ContactPoint]:
        g = self.g
        a, _, _ = peg_axes(tilt)
        c = bottom_center(P, tilt, g.peg_radius)
        rel = self.rim - c
        s = rel @ a
        radial = rel - np.outer(s, a)
        rho = np.sqrt(np.einsum("ij,ij->i", radial, radial))
        inside = (s > 0) & (s < g.peg_length) & (rho < g.peg_radius)
        n_face = np.broadcast_to(a, rel.shape)
        n_side = -radial / np.maximum(rho, 1e-12)[:, None]
        d_side = g.peg_radius - rho
        d, n = _chamfer(s, n_face, d_side, n_side, inside)
        return _run_contacts(self.rim, inside, d, n, face_share(s, d_side),
                             self._rim_ds, "rim")

    def edge_contacts(self, P, tilt) -> list[ContactPoint]:
        g = self.g
        pts = self.peg_edge(P, tilt)
        z = pts[:, 2]
        if z.min() >= 0.0:
            return []
        xh, yh = g.hole_center
        dxy = pts[:, :2] - np.array([xh, yh])
        r = np.sqrt(np.einsum("ij,ij->i", dxy, dxy))
        Rh, H = g.hole_radius, g.hole_depth
        in_block = (z < 0) & ((r >= Rh) | (z < -H))
        if not in_block.any():
            return []
        outside = r >= Rh
        d_up = np.where(outside, -z, -H - z)
        d_rad = np.where(outside & (z > -H), r - Rh, np.inf)
        up = np.zeros_like(pts)
        up[:, 2] = 1.0
        inward = np.zeros_like(pts)
        inward[:, :2] = -dxy / np.maximum(r, 1e-12)[:, None]
        d, n = _chamfer(d_up, up, d_rad, inward, in_block)
        return _run_contacts(pts, in_block, d, n, face_share(d_up, d_rad),
                             self._edge_ds, "edge")

    def contacts(self, P, tilt) -> list[ContactPoint]:
        P = np.asarray(P, dtype=float)
        g = self.g
        xh, yh = g.hole_center
        reach = g.peg_radius * 2 + g.peg_length * math.sin(math.radians(tilt)) + 1.0
        near_rim = math.hypot(P[0] - xh, P[1] - yh) < g.hole_radius + reach
        rim = self.rim_contacts(P, tilt) if near_rim and P[2] < g.peg_length else []
        return rim + self.edge_contacts(P, tilt)


def classify_mode(contacts, g: Geometry, P, tilt: float) -> ContactMode:
    if not contacts:
        if (tilt < 0.5 and P[2] < 0.0 and _axis_offset(g, P, tilt) < g.clearance / 2):
            return ContactMode.INSERTED
        return ContactMode.FREE
    if tilt < 0.5 and P[2] < 0.0 and _axis_offset(g, P, tilt) < g.clearance / 2:
        return ContactMode.INSERTED
    n = len(contacts)
    if n == 1:
        c = contacts[0]
        return ContactMode.RIM_POINT if c.source == "rim" else ContactMode.POINT_ON_PLANE
    if n == 2:
        return ContactMode.TWO_POINT
    return ContactMode.THREE_POINT


def _axis_offset(g: Geometry, P, tilt) -> float:
    c = bottom_center(P, tilt, g.peg_radius)
    xh, yh = g.hole_center
    return math.hypot(c[0] - xh, c[1] - yh)


def aggregate_normal_force(contacts, stiffness: float, frictional: bool = False) -> np.ndarray:
    """Penetration-weighted spring resultant on the peg.

    The resultant is k * sum(moment) / sum(weight): a single contact gives
    k * depth along its normal, and several contacts share the load in
    proportion to their penetrated area, so the stiffness seen along one
    push direction stays k however the samples group into runs.  With
    ``frictional`` only the flat-face part of each moment is summed (the
    weights still cover every contact).
    """
    W = sum(c.weight for c in contacts)
    if W <= 0.0:
        return np.zeros(3)
    m = sum((c.friction_moment if frictional else c.moment) for c in contacts)
    return stiffness * np.asarray(m) / W


@dataclass
class FrictionState:
    anchor: Optional[np.ndarray] = None
    stuck: bool = True
    slip_time: float = 0.0
    last_position: Optional[np.ndarray] = None


def friction_force(fs: FrictionState, P, normal_force, material: Material,
                   k_t: float, dt: float, v_threshold: float = 0.1) -> np.ndarray:
    """Elasto-plastic stick/slip: an anchor spring capped by mu_s N, sliding at mu_k N.

    Sticks again when the tangential speed falls below ``v_threshold`` or
    after ``stick_dwell`` seconds of sliding.  Mutates ``fs``.
    """
    P = np.asarray(P, dtype=float)
    N = float(np.linalg.norm(normal_force))
    if N <= 1e-12:
        fs.anchor, fs.stuck, fs.slip_time, fs.last_position = None, True, 0.0, P.copy()
        return np.zeros(3)
    nhat = normal_force / N
    if fs.anchor is None:
        fs.anchor, fs.stuck, fs.slip_time = P.copy(), True, 0.0
    prev = fs.last_position if fs.last_position is not None else P
    fs.last_position = P.copy()
    delta = P - fs.anchor
    delta -= (delta @ nhat) * nhat
    dist = float(np.linalg.norm(delta))
    if fs.stuck:
        if k_t * dist > material.mu_s * N:
            fs.stuck, fs.slip_time = False, 0.0
    else:
        fs.slip_time += dt
        v = P - prev
        v -= (v @ nhat) * nhat
        speed = float(np.linalg.norm(v)) / dt
        if speed < v_threshold or fs.slip_time >= material.stick_dwell:
            fs.stuck = True
    if not fs.stuck:
        cap = material.mu_k * N / k_t
        if dist > cap:
            delta *= cap / dist
            fs.anchor = P - delta
    return -k_t * delta


def resolve_contact(ws: WorldState, geom: ContactGeometry, material: Material,
                    friction: FrictionState, cfg: WorldConfig):
    """Forces on the peg at pose ``ws``; returns (updated state, force on peg)."""
    contacts = geom.contacts(ws.position, ws.tilt)
    pens = tuple(c.peak for c in contacts)
    if pens and max(pens) > cfg.max_penetration:
        raise SimulationBlowup(f"penetration {max(pens):.3f} mm exceeds {cfg.max_penetration} mm")
    fn = aggregate_normal_force(contacts, material.stiffness)
    f_faces = aggregate_normal_force(contacts, material.stiffness, frictional=True)
    ft = friction_force(friction, ws.position, f_faces, material,
                        cfg.tangential_stiffness_ratio * material.stiffness,
                        cfg.dt, cfg.stick_velocity)
    mode = classify_mode(contacts, geom.g, ws.position, ws.tilt)
    new = replace(ws, contact_mode=mode, penetrations=pens, stuck=friction.stuck)
    return new, fn + ft


def to_sensor_frame(force_on_peg) -> np.ndarray:
    """World force on the peg -> F^c (force on the environment, z down)."""
    g = np.asarray(force_on_peg, dtype=float)
    return np.array([-g[0], -g[1], g[2]])


def sense(ws: WorldState, force_on_peg, rng: np.random.Generator,
          cfg: WorldConfig) -> SensorFrame:
    fc = to_sensor_frame(force_on_peg)
    sf, sp = cfg.sigma_force, cfg.sigma_position
    noise_f = rng.standard_normal(3) * sf
    noise_p = rng.standard_normal(3) * sp
    if cfg.x_force_noise_enabled and cfg.x_force_noise > 0:
        noise_f[0] += rng.standard_normal() * cfg.x_force_noise
    fc = fc + noise_f
    fw = wrench_rotation(ws.tilt).T @ fc
    return SensorFrame(ws.time, fc, fw, ws.position + noise_p, ws.tilt)


# -- the stepping world ---------------------------------------------------------

class World:
    """Robot + block: commanded pose -> actual pose -> contact -> delayed sensing."""

    def __init__(self, cfg: WorldConfig, material: Material, initial_position,
                 initial_tilt: float, rng: np.random.Generator):
        self.cfg = cfg
        self.material = material
        self.geom = ContactGeometry(cfg.geometry, cfg.rim_samples, cfg.edge_samples)
        self.rng = rng
        inner = lti.to_state_space(cfg.inner_loop())
        self._A, self._B, self._C = inner.A, inner.B[:, 0], inner.C[0]
        self._x = np.zeros((inner.n_states, 4))
        self.origin = np.concatenate([np.asarray(initial_position, dtype=float), [initial_tilt]])
        self.state = WorldState(self.origin[:3].copy(), float(initial_tilt))
        self.friction = FrictionState()
        self.true_force = np.zeros(3)  # on the peg
        self._pending: list[SensorFrame] = []
        self.step_index = 0

    def observe(self) -> Optional[SensorFrame]:
        """Resolve contact at the current pose and return the delayed frame.

        The frame handed back was sensed ``sensor_delay_steps`` samples ago;
        it is ``None`` until the delay line has filled.
        """
        cfg = self.cfg
        t = self.step_index * cfg.dt
        pose = self.origin + self._C @ self._x
        if not np.all(np.isfinite(pose)):
            raise SimulationBlowup("non-finite peg pose")
        tilt = float(np.clip(pose[3], 0.0, 45.0))
        ws = replace(self.state, position=pose[:3].copy(), tilt=tilt, time=t)
        ws, f = resolve_contact(ws, self.geom, self.material, self.friction, cfg)
        self.state, self.true_force = ws, f
        self._pending.append(sense(ws, f, self.rng, cfg))
        if len(self._pending) > cfg.sensor_delay_steps:
            return self._pending.pop(0)
        return None

    def command(self, position, tilt: float) -> None:
        """Feed this sample's pose command to the inner position loops."""
        u = np.concatenate([np.asarray(position, dtype=float), [tilt]])
        if not np.all(np.isfinite(u)):
            raise SimulationBlowup("non-finite pose command")
        self._x = self._A @ self._x + np.outer(self._B, u - self.origin)
        self.step_index += 1
