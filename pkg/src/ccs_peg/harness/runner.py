"""Trial and experiment execution."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from multiprocessing import get_context
from typing import Optional, Sequence

import numpy as np

from ..controllers import (ControllerChoice, HybridController, NonFiniteError,
                           tune_integral, tune_integral_margin)
from ..strategy import AssemblyState, Strategy
from ..synthesis import (ContactPlantModel, SynthesizedController, default_family,
                         synthesize)
from ..world import SimulationBlowup, World
from .config import ScenarioConfig, validate_config

log = logging.getLogger(__name__)

SUCCESS = "Success"


@dataclass
class TrialRecord:
    seed: int
    material: str
    controller: str
    start_offset: tuple
    outcome: str  # "Success" or "Failed"
    reason: str
    final_state: str
    duration: float  # s after first contact (nan if no contact)
    search_duration: float  # first contact -> hole detected (nan if never)
    fail_state: Optional[str]
    t: np.ndarray
    P: np.ndarray
    F: np.ndarray
    Fw: np.ndarray
    state: list
    events: list = field(default_factory=list)
    trial_index: int = 0

    @property
    def success(self) -> bool:
        return self.outcome == SUCCESS

    @property
    def max_force(self) -> float:
        if len(self.F) == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.F, axis=1)))

    def summary_row(self) -> dict:
        return {"trial_index": self.trial_index, "seed": self.seed, "material": self.material,
                "controller": self.controller, "start_offset": list(self.start_offset),
                "outcome": self.outcome, "reason": self.reason,
                "final_state": self.final_state, "fail_state": self.fail_state,
                "duration": self.duration, "search_duration": self.search_duration,
                "max_force": self.max_force}


@dataclass(frozen=True)
class MaterialRow:
    material: str
    trials: int
    successes: int
    mean_duration: float  # over successful trials; nan if none

    @property
    def success_rate(self) -> float:
        return 100.0 * self.successes / self.trials if self.trials else float("nan")


@dataclass(frozen=True)
class ExperimentSummary:
    controller: str
    rows: tuple
    total: MaterialRow

    def to_dict(self) -> dict:
        def row(r: MaterialRow):
            return {"material": r.material, "trials": r.trials, "successes": r.successes,
                    "success_rate": r.success_rate,
                    "mean_duration": None if math.isnan(r.mean_duration) else r.mean_duration}
        return {"controller": self.controller, "materials": [row(r) for r in self.rows],
                "total": row(self.total)}

    def table(self) -> str:
        lines = [f"{'material':<10} {'trials':>6} {'success %':>10} {'mean t (s)':>11}"]
        for r in (*self.rows, self.total):
            md = "-" if math.isnan(r.mean_duration) else f"{r.mean_duration:.2f}"
            lines.append(f"{r.material:<10} {r.trials:>6} {r.success_rate:>10.1f} {md:>11}")
        return "\n".join(lines)


def summarize(records: Sequence[TrialRecord], controller: str) -> ExperimentSummary:
    mats: list[str] = []
    for r in records:
        if r.material not in mats:
            mats.append(r.material)

    def row(name, recs):
        ok = [r.duration for r in recs if r.success]
        mean = math.fsum(ok) / len(ok) if ok else float("nan")
        return MaterialRow(name, len(recs), len(ok), mean)

    rows = tuple(row(m, [r for r in records if r.material == m]) for m in mats)
    return ExperimentSummary(controller, rows, row("total", list(records)))


# -- controller construction ---------------------------------------------------

def nominal_model(cfg: ScenarioConfig) -> ContactPlantModel:
    w = cfg.world
    return ContactPlantModel(w.inner_loop(), cfg.controller.synthesis.nominal_stiffness,
                             w.sensor_delay_steps)


_design_cache: dict = {}


def controller_choice(cfg: ScenarioConfig) -> ControllerChoice:
    c = cfg.controller
    spec = c.synthesis
    if c.kind == "ccs":
        key = ("ccs", c.ccs_path, spec, cfg.world)
        if key not in _design_cache:
            if c.ccs_path:
                design = SynthesizedController.load(c.ccs_path)
            else:
                m = nominal_model(cfg)
                stiff = np.arange(spec.robust_interval[0], spec.robust_interval[1] + 1e-9, 5.0)
                design = synthesize(spec, default_family(m.inner_loop, m.sensor_delay_steps, stiff))
            _design_cache[key] = design
        return ControllerChoice("ccs", synthesized=_design_cache[key], clamp=c.clamp)
    if c.kind == "int_s":
        return ControllerChoice("int_s", ki=tune_integral(spec.target_time_constant,
                                                          spec.nominal_stiffness), clamp=c.clamp)
    key = ("int_h", c.int_h_gain_margin, c.int_h_stiffness, cfg.world)
    if key not in _design_cache:
        m = nominal_model(cfg).with_stiffness(c.int_h_stiffness)
        _design_cache[key] = tune_integral_margin(m, c.int_h_gain_margin)
    return ControllerChoice("int_h", ki=_design_cache[key], clamp=c.clamp)


# -- trials -------------------------------------------------------------------

def start_offset(master_seed: int, trial_index: int, radius: float) -> tuple:
    """Uniform sample on a disk: r = R sqrt(U), phi = 2 pi V."""
    rng = np.random.default_rng([master_seed, trial_index, 1])
    u, v = rng.random(2)
    r = radius * math.sqrt(u)
    phi = 2 * math.pi * v
    return (r * math.cos(phi), r * math.sin(phi))


def run_trial(cfg: ScenarioConfig, material: str, seed: int,
              offset: Optional[tuple] = None, choice: Optional[ControllerChoice] = None,
              trial_index: int = 0, record: bool = True) -> TrialRecord:
    """One assembly attempt; deterministic in (cfg, material, seed, offset)."""
    mat = cfg.material(material)
    if choice is None:
        choice = controller_choice(cfg)
    if offset is None:
        offset = start_offset(seed, 0, cfg.plan.offset_radius)
    g = cfg.world.geometry
    rng = np.random.default_rng([seed, 2])
    sx, sy = g.hole_center[0] + offset[0], g.hole_center[1] + offset[1]
    strat = Strategy(cfg.strategy, (sx, sy), 0.0, cfg.world.dt)
    start = np.array([sx, sy, strat.approach_z])
    world = World(cfg.world, mat, start, cfg.strategy.tilt, rng)
    hybrid = HybridController(choice.factory(), start)
    max_steps = int(round(cfg.plan.global_timeout / cfg.world.dt))
    ts, Ps, Fs, Fws, states = [], [], [], [], []
    zero = np.zeros(3)
    for _ in range(max_steps):
        try:
            frame = world.observe()
        except SimulationBlowup:
            strat.fail("blowup")
            break
        out = strat.advance(frame)
        if frame is not None and record:
            ts.append(frame.t)
            Ps.append(frame.position)
            Fs.append(frame.force)
            Fws.append(frame.wrench)
            states.append(strat.state.label)
        if strat.finished:
            break
        try:
            cmd = hybrid.step(out.frame, frame.force if frame is not None else zero,
                              frame.tilt if frame is not None else cfg.strategy.tilt,
                              strat.t_state)
            world.command(cmd, out.tilt)
        except (NonFiniteError, SimulationBlowup):
            strat.fail("nonfinite")
            break
    else:
        strat.fail("global timeout")

    success = strat.state is AssemblyState.VIII
    t_end = strat.t
    fc = strat.first_contact_t
    duration = (t_end - fc) if fc is not None else float("nan")
    hole_t = next((e.t for e in strat.events if e.target is AssemblyState.III), None)
    search = (hole_t - fc) if (hole_t is not None and fc is not None) else float("nan")
    fail_state = strat.events[-1].source.label if not success and strat.events else None
    rec = TrialRecord(
        seed=seed, material=material, controller=choice.kind,
        start_offset=(float(offset[0]), float(offset[1])),
        outcome=SUCCESS if success else "Failed",
        reason="inserted" if success else (strat.fail_reason or "unknown"),
        final_state=strat.state.label, duration=duration, search_duration=search,
        fail_state=fail_state,
        t=np.array(ts), P=np.array(Ps).reshape(-1, 3), F=np.array(Fs).reshape(-1, 3),
        Fw=np.array(Fws).reshape(-1, 3), state=states,
        events=[(e.t, e.source.label, e.target.label, e.reason) for e in strat.events],
        trial_index=trial_index)
    if success and rec.max_force > cfg.strategy.force_limit:
        rec.outcome, rec.reason = "Failed", "overforce"
    return rec


def trial_plan(cfg: ScenarioConfig) -> list[tuple[int, str, int, tuple]]:
    """(trial_index, material, seed, offset) for every trial, in a fixed order."""
    p = cfg.plan
    out = []
    idx = 0
    for m in p.materials:
        for _ in range(p.trials_per_material):
            seed = p.master_seed + idx
            out.append((idx, m, seed, start_offset(seed, idx, p.offset_radius)))
            idx += 1
    return out


def _run_one(args):
    cfg, idx, material, seed, offset = args
    return run_trial(cfg, material, seed, offset, trial_index=idx)


def run_experiment(cfg: ScenarioConfig, workers: Optional[int] = None):
    """Execute the whole plan; returns (summary, records ordered by trial index)."""
    validate_config(cfg)
    plan = trial_plan(cfg)
    workers = workers or cfg.plan.workers
    controller_choice(cfg)  # build the design once before forking
    jobs = [(cfg, i, m, s, o) for i, m, s, o in plan]
    if workers > 1:
        with get_context("fork").Pool(workers) as pool:
            records = pool.map(_run_one, jobs, chunksize=1)
    else:
        records = [_run_one(j) for j in jobs]
    records.sort(key=lambda r: r.trial_index)
    return summarize(records, cfg.controller.kind), records
