"""Acceptance suite: one test per criterion, each reported as a PASS or FAIL line.

Run with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``;
the verdicts appear in the "acceptance criteria" section of the terminal summary.
"""

import math
import sys
import time

import numpy as np
import pytest

from ccs_peg import lti
from ccs_peg.controllers import (HybridController, ImcLaw, integral_closed_loop_radius,
                                 integral_system)
from ccs_peg.harness.logs import export_logs
from ccs_peg.harness.runner import controller_choice, run_experiment
from ccs_peg.strategy import (AssemblyState, SpiralState, Strategy, coverage_bound, spiral_step)
from ccs_peg.synthesis import (build_plant, certify, closed_loop, default_family,
                               q_to_controller, rise_time_63, step_response, synthesize)
from ccs_peg.world import World, depth_profile

from test_controllers import run_law_in_loop
from test_synthesis import affine_prediction, simulate_interconnection
from test_world import G, oracle_depth

DT = lti.SAMPLE_PERIOD
THIRTY_S = int(round(30.0 / DT))
TABLE_STIFFNESS = (10.0, 50.0, 65.0, 100.0)


def force_step(H, n):
    """Force for a 1 N setpoint, from the reference-to-error map H."""
    return 1.0 - step_response(H, n)


def test_criterion_1_nominal_response(verdict, default_cfg, nominal):
    with verdict(1, "nominal 63% rise time at 10 N/mm is 0.17 s +-15%") as notes:
        spec = default_cfg.controller.synthesis
        stiff = np.arange(spec.robust_interval[0], spec.robust_interval[1] + 1e-9, 5.0)
        t0 = time.perf_counter()
        design = synthesize(spec, default_family(nominal.inner_loop, nominal.sensor_delay_steps,
                                                 stiff))
        t_syn = time.perf_counter() - t0
        t0 = time.perf_counter()
        f = force_step(closed_loop(build_plant(nominal), design.controller), THIRTY_S)
        t_sim = time.perf_counter() - t0
        rise = rise_time_63(f, DT)
        notes.append(f"rise {rise:.4f} s, synthesis {t_syn:.2f} s, 30 s simulation {t_sim:.3f} s")
        assert rise == pytest.approx(0.17, rel=0.15)
        assert abs(f[-1] - 1.0) < 1e-3
        assert t_sim < 1.0
        assert t_syn < 60.0


def test_criterion_2_robust_stability(verdict, nominal, design):
    with verdict(2, "certificate below 1 on 10..100 N/mm and bounded 30 s loops") as notes:
        cert = certify(design.controller, nominal, np.arange(10.0, 100.0 + 1e-9, 5.0))
        worst = max(r for _, r in cert)
        notes.append(f"{len(cert)} stiffnesses, worst radius {worst:.4f}")
        assert [k for k, _ in cert] == [float(k) for k in range(10, 101, 5)]
        assert worst < 1.0
        peaks = {}
        for k in TABLE_STIFFNESS:
            f, _ = run_law_in_loop(ImcLaw.from_synthesized(design),
                                   nominal.with_stiffness(k).force_map(), THIRTY_S)
            peaks[k] = float(np.max(np.abs(f)))
        notes.append("peak |f| " + ", ".join(f"{k:g}: {p:.3f}" for k, p in peaks.items()))
        assert all(p < 10.0 for p in peaks.values())


def test_criterion_3_integral_dichotomy(verdict, default_cfg, nominal, design):
    with verdict(3, "fast integral destabilizes on stiff contact, hand-tuned one is slow") as notes:
        ki_s = controller_choice(default_cfg.with_controller("int_s")).ki
        radius = {k: integral_closed_loop_radius(ki_s, nominal.with_stiffness(k))
                  for k in np.arange(10.0, 100.0 + 1e-9, 5.0)}
        unstable = [k for k, r in radius.items() if r > 1.0]
        notes.append(f"INT_s radius {radius[10.0]:.3f} at 10, {radius[50.0]:.3f} at 50, "
                     f"unstable from {min(unstable, default=math.nan):g} N/mm")
        assert radius[10.0] < 1.0
        assert radius[50.0] > 1.0
        assert unstable and min(unstable) <= 100.0

        ki_h = controller_choice(default_cfg.with_controller("int_h")).ki
        n = int(round(60.0 / DT))
        f_h = force_step(closed_loop(build_plant(nominal), integral_system(ki_h)), n)
        f_c = force_step(closed_loop(build_plant(nominal), design.controller), n)
        tau_h, tau_c = rise_time_63(f_h, DT), rise_time_63(f_c, DT)
        notes.append(f"INT_h tau {tau_h:.3f} s vs CCS {tau_c:.3f} s (x{tau_h / tau_c:.2f})")
        assert abs(f_h[-1] - 1.0) < 0.02, "INT_h does not complete the step"
        assert tau_h >= 3.0 * tau_c


def test_criterion_4_ccs_experiment(verdict, ccs_plan):
    with verdict(4, "CCS succeeds on all 48 trials within 50 N") as notes:
        s, recs = ccs_plan.summary, ccs_plan.records
        notes.append(f"success {s.total.success_rate:.1f}%, mean {s.total.mean_duration:.2f} s, "
                     f"max |F| {max(r.max_force for r in recs):.1f} N, "
                     f"wall {ccs_plan.wall_time:.0f} s")
        assert len(recs) == 48
        assert [r.trials for r in s.rows] == [12, 12, 12, 12]
        assert s.total.success_rate == 100.0
        assert all(r.max_force <= 50.0 for r in recs if r.success)
        assert s.total.mean_duration < 60.0
        assert ccs_plan.wall_time < 300.0


def test_criterion_5_integral_experiments(verdict, ccs_plan, int_s_plan, int_h_plan):
    with verdict(5, "INT_s fails after contact off rubber, INT_h halts or searches slower") as notes:
        stiff = [r for r in int_s_plan.records if r.material != "rubber"]
        reasons = sorted({r.reason for r in stiff})
        notes.append(f"INT_s non-rubber failures {sum(not r.success for r in stiff)}/{len(stiff)} "
                     f"({', '.join(reasons)})")
        assert len(stiff) == 36
        for r in stiff:
            assert not r.success, (r.trial_index, r.material)
            assert r.reason in ("instability", "overforce"), (r.trial_index, r.reason)
            assert r.fail_state != "I", (r.trial_index, "failed before contact")

        ccs = {r.trial_index: r for r in ccs_plan.records}
        halted = slower = 0
        for r in int_h_plan.records:
            if r.reason == "overforce" and r.fail_state == "VI":
                halted += 1
                continue
            mine = r.search_duration if math.isfinite(r.search_duration) else math.inf
            assert mine >= 1.5 * ccs[r.trial_index].search_duration, r.trial_index
            slower += 1
        notes.append(f"INT_h halted in VI {halted}, slower search {slower}")


def spiral_search(cfg, choice, material, offset, seed):
    """Closed-loop run from a start offset until the hole is found; returns (found, theta)."""
    g = cfg.world.geometry
    sx, sy = g.hole_center[0] + offset[0], g.hole_center[1] + offset[1]
    strat = Strategy(cfg.strategy, (sx, sy), 0.0, cfg.world.dt)
    start = np.array([sx, sy, strat.approach_z])
    world = World(cfg.world, cfg.material(material), start, cfg.strategy.tilt,
                  np.random.default_rng([seed, 2]))
    hybrid = HybridController(choice.factory(), start)
    theta = 0.0
    while not strat.finished:
        frame = world.observe()
        out = strat.advance(frame)
        if strat.state is AssemblyState.II:
            theta = strat.spiral.theta_est
        if any(e.target is AssemblyState.III for e in strat.events):
            return True, theta
        force = frame.force if frame is not None else np.zeros(3)
        tilt = frame.tilt if frame is not None else cfg.strategy.tilt
        world.command(hybrid.step(out.frame, force, tilt, strat.t_state), out.tilt)
    return False, theta


def test_criterion_6_spiral_properties(verdict, default_cfg):
    with verdict(6, "spiral pitch 7.5 mm +-1% and hole found from every start in 20 mm") as notes:
        p = default_cfg.strategy
        s = SpiralState((0.0, 0.0), p.pitch, v=p.speed.v_max)
        pts = np.array([spiral_step(s) for _ in range(int(150.0 / DT))])
        r = np.hypot(pts[:, 0], pts[:, 1])
        ang = np.unwrap(np.arctan2(pts[:, 1], pts[:, 0]))
        gaps = []
        for turn in range(1, int(ang[-1] / (2 * math.pi)) - 1):
            a = 2 * math.pi * turn + 0.3
            gaps.append(np.interp(a + 2 * math.pi, ang, r) - np.interp(a, ang, r))
        notes.append(f"{len(gaps)} turns, separation {min(gaps):.4f}..{max(gaps):.4f} mm")
        assert np.all(np.abs(np.array(gaps) - 7.5) <= 0.075)

        bound = coverage_bound(default_cfg.plan.offset_radius, p.pitch)
        choice = controller_choice(default_cfg)
        mats = default_cfg.plan.materials
        worst, missed = 0.0, []
        for i in range(16):
            for j in range(16):
                rad = default_cfg.plan.offset_radius * (i + 1) / 16
                phi = 2 * math.pi * j / 16
                off = (rad * math.cos(phi), rad * math.sin(phi))
                found, theta = spiral_search(default_cfg, choice, mats[(16 * i + j) % len(mats)],
                                             off, 16 * i + j)
                worst = max(worst, theta)
                if not found or theta > bound:
                    missed.append((i, j, found, theta))
        notes.append(f"256 starts, largest theta at detection {worst:.2f} of {bound:.2f} rad")
        assert not missed, missed[:5]


def test_criterion_7_oracle_suites(verdict, nominal, design):
    with verdict(7, "independent oracles agree with the library") as notes:
        xs = np.linspace(-20.0, 20.0, 50)
        depth_err = max(abs(depth_profile(G, 30.0, x, y) - oracle_depth(G, 30.0, x, y))
                        for x in xs for y in xs)
        assert depth_err <= 0.01

        w = np.random.default_rng(7).standard_normal(400)
        lft_err = 0.0
        for k in TABLE_STIFFNESS:
            plant = build_plant(nominal.with_stiffness(k))
            z = lti.simulate(closed_loop(plant, design.controller), w)
            lft_err = max(lft_err, float(np.max(np.abs(z - simulate_interconnection(
                plant, design.controller, w)))))
        assert lft_err <= 1e-8

        rng = np.random.default_rng(11)
        plant = build_plant(nominal)
        aff_err = 0.0
        for _ in range(100):
            q = rng.standard_normal(int(rng.integers(1, 17)))
            H = closed_loop(plant, q_to_controller(q, plant))
            aff_err = max(aff_err, float(np.max(np.abs(H.impulse(200)
                                                       - affine_prediction(plant, q, 200)))))
        assert aff_err <= 1e-8
        notes.append(f"depth {depth_err:.2e} mm, LFT {lft_err:.1e}, affine {aff_err:.1e}")


def test_criterion_8_determinism(verdict, tmp_path, ccs_plan):
    with verdict(8, "repeated CCS experiment writes identical logs") as notes:
        _, again = run_experiment(ccs_plan.cfg)
        a = export_logs(ccs_plan.records, tmp_path / "first", ccs_plan.cfg, timestamp="fixed")
        b = export_logs(again, tmp_path / "second", ccs_plan.cfg, timestamp="fixed")
        differ = [pa.name for pa, pb in zip(a["csv"], b["csv"])
                  if pa.name != pb.name or pa.read_bytes() != pb.read_bytes()]
        notes.append(f"{len(a['csv'])} CSV logs compared, {len(differ)} differ")
        assert len(a["csv"]) == len(b["csv"]) == 48
        assert not differ
        assert a["summary"].read_bytes() == b["summary"].read_bytes()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
