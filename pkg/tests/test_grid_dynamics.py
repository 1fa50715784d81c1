import csv
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

import grid_dynamics as gd
import grid_model as gm

DATA_DIR = Path(__file__).resolve().parents[1] / "data"
DBAR2 = math.pi / 3.7


def two_bus():
    return gm.load_grid(DATA_DIR / "two_bus.json")


class OptionsTests(unittest.TestCase):
    def test_defaults(self):
        opts = gd.IntegratorOptions()
        self.assertEqual(opts.step, 1e-3)
        self.assertEqual(opts.t_back_max, 50.0)
        self.assertEqual(opts.omega_cap, 10.0)
        self.assertEqual(set(opts.to_dict()), {"step", "t_back_max", "omega_cap", "box_margin", "event_tol"})

    def test_rejects_nonpositive_and_non_numbers(self):
        for bad in ({"step": 0}, {"step": -1e-3}, {"omega_cap": float("inf")}, {"t_back_max": "50"}, {"step": True}):
            with self.subTest(bad=bad):
                with self.assertRaises(ValueError):
                    gd.IntegratorOptions(**bad)

    def test_set_kind_parse(self):
        self.assertIs(gd.SetKind.parse("MRPI"), gd.SetKind.MRPI)
        self.assertIs(gd.SetKind.parse(" admissible "), gd.SetKind.ADMISSIBLE)
        self.assertIs(gd.SetKind.parse(gd.SetKind.MRPI), gd.SetKind.MRPI)
        with self.assertRaisesRegex(ValueError, "unknown set kind"):
            gd.SetKind.parse("both")


class VectorFieldTests(unittest.TestCase):
    def setUp(self):
        grid = two_bus()
        self.gen = gm.decouple(grid, "1")
        self.load = gm.decouple(grid, "2")

    def test_generator_rhs(self):
        omega, omega_dot = gd.generator_rhs(self.gen, gd.GenState(0.0, 0.0), [0.0])
        self.assertEqual(omega, 0.0)
        self.assertAlmostEqual(omega_dot, 0.4, places=12)
        # damping and coupling both pull back
        omega, omega_dot = gd.generator_rhs(self.gen, (0.5, 0.2), [0.0])
        self.assertEqual(omega, 0.2)
        self.assertAlmostEqual(omega_dot, -0.2 - 0.8 * math.sin(0.5) + 0.4, places=12)

    def test_load_rhs(self):
        self.assertAlmostEqual(gd.load_rhs(self.load, 0.0, [math.pi / 2]), 0.1, places=12)
        self.assertAlmostEqual(gd.load_rhs(self.load, 0.0, [-math.pi / 2]), -1.5, places=12)

    def test_fixed_neighbors_enter_coupling(self):
        grid = gm.load_grid(DATA_DIR / "six_bus.json")
        node = gm.decouple(grid, "1")
        d = [0.0] * 4
        self.assertAlmostEqual(gd.coupling_sum(node, 0.3, d), (4 * 0.2 + 2.0) * math.sin(0.3), places=12)

    def test_adjoint_rhs(self):
        lam_dot = gd.adjoint_rhs(self.gen, (0.0, 0.0), [0.0], gd.Adjoint(1.0, 0.0))
        self.assertAlmostEqual(lam_dot.l1, 0.0)
        self.assertAlmostEqual(lam_dot.l2, -1.0)
        lam_dot = gd.adjoint_rhs(self.gen, (0.0, 0.0), [0.0], (0.0, 1.0))
        self.assertAlmostEqual(lam_dot.l1, 0.8)
        self.assertAlmostEqual(lam_dot.l2, 1.0)

    def test_kind_mismatches_raise(self):
        with self.assertRaises(ValueError):
            gd.generator_rhs(self.load, (0.0, 0.0), [0.0])
        with self.assertRaises(ValueError):
            gd.load_rhs(self.gen, 0.0, [0.0])
        with self.assertRaises(ValueError):
            gd.adjoint_rhs(self.load, (0.0, 0.0), [0.0], (1.0, 0.0))

    def test_fields_are_periodic_in_a_joint_shift(self):
        grid = gm.load_grid(DATA_DIR / "six_bus.json")
        gen, load = gm.decouple(grid, "1"), gm.decouple(grid, "5")
        rng = np.random.default_rng(7)
        two_pi = 2 * math.pi
        for _ in range(20):
            delta, omega = rng.uniform(-3, 3), rng.uniform(-2, 2)
            d = rng.uniform(-math.pi / 2, math.pi / 2, size=4)
            base = gd.generator_rhs(gen, (delta, omega), d)
            shifted = gd.generator_rhs(gen, (delta + two_pi, omega), d + two_pi)
            np.testing.assert_allclose(shifted, base, rtol=0, atol=1e-12)
            self.assertAlmostEqual(
                gd.load_rhs(load, delta + two_pi, d + two_pi), gd.load_rhs(load, delta, d), places=12
            )

    def test_disturbance_length_checked(self):
        with self.assertRaisesRegex(ValueError, "expected 1"):
            gd.generator_rhs(self.gen, (0.0, 0.0), [0.0, 0.0])


class ExtremalDisturbanceTests(unittest.TestCase):
    lo = np.array([-DBAR2])
    hi = np.array([DBAR2])

    def test_mrpi_branches(self):
        up = gd.extremal_disturbance("mrpi", 0.0, 1.0, self.lo, self.hi)
        down = gd.extremal_disturbance("mrpi", 0.0, -1.0, self.lo, self.hi)
        self.assertAlmostEqual(float(up[0]), DBAR2)
        self.assertAlmostEqual(float(down[0]), -DBAR2)

    def test_admissible_swaps_branches(self):
        up = gd.extremal_disturbance(gd.SetKind.ADMISSIBLE, 0.0, 1.0, self.lo, self.hi)
        self.assertAlmostEqual(float(up[0]), -DBAR2)

    def test_unsaturated_value_is_quarter_turn_away(self):
        out = gd.extremal_disturbance("mrpi", -1.0, 1.0, self.lo, self.hi)
        self.assertAlmostEqual(float(out[0]), -1.0 + math.pi / 2)

    def test_tie_takes_upper_branch(self):
        out = gd.extremal_disturbance("mrpi", 0.0, 0.0, self.lo, self.hi)
        self.assertAlmostEqual(float(out[0]), DBAR2)

    def test_disturbance_maximizes_hamiltonian_for_mrpi(self):
        node = gm.decouple(two_bus(), "1")
        s = (0.2, 0.1)
        for l2 in (1.0, -1.0):
            lam = (0.3, l2)
            best = gd.extremal_disturbance("mrpi", s[0], l2, node.d_lo, node.d_hi)
            h_best = gd.hamiltonian(lam, gd.generator_rhs(node, s, best))
            for d in np.linspace(-DBAR2, DBAR2, 41):
                with self.subTest(l2=l2, d=float(d)):
                    h = gd.hamiltonian(lam, gd.generator_rhs(node, s, [d]))
                    self.assertLessEqual(h, h_best + 1e-12)


class IntegratorTests(unittest.TestCase):
    def test_exponential_decay(self):
        opts = gd.IntegratorOptions(step=1e-2)
        res = gd.integrate(lambda t, x: -x, [1.0], "forward", opts, horizon=1.0)
        self.assertEqual(res.termination.reason, "Horizon")
        self.assertAlmostEqual(float(res.t[-1]), 1.0, places=9)
        self.assertAlmostEqual(float(res.x[-1, 0]), math.exp(-1.0), places=8)
        self.assertEqual(res.x.shape, (101, 1))

    def test_backward_runs_to_time_cap(self):
        opts = gd.IntegratorOptions(step=1e-2, t_back_max=0.5)
        res = gd.integrate(lambda t, x: -x, [1.0], "backward", opts)
        self.assertEqual(res.termination.reason, "TimeCap")
        self.assertAlmostEqual(float(res.t[-1]), -0.5, places=9)
        self.assertAlmostEqual(float(res.x[-1, 0]), math.exp(0.5), places=8)

    def test_terminal_event_localized(self):
        opts = gd.IntegratorOptions(step=1e-2)
        ev = gd.Event("Half", lambda t, x: x[0] - 0.505)
        res = gd.integrate(lambda t, x: np.ones(1), [0.0], "forward", opts, [ev], horizon=2.0)
        self.assertEqual(res.termination.reason, "Half")
        self.assertAlmostEqual(res.termination.t, 0.505, places=9)
        self.assertAlmostEqual(float(res.x[-1, 0]), 0.505, places=9)
        self.assertEqual([h.name for h in res.hits], ["Half"])

    def test_event_landing_on_step_boundary(self):
        opts = gd.IntegratorOptions(step=0.25)
        ev = gd.Event("Half", lambda t, x: x[0] - 0.5)
        res = gd.integrate(lambda t, x: np.ones(1), [0.0], "forward", opts, [ev], horizon=2.0)
        self.assertEqual(res.termination.reason, "Half")
        self.assertAlmostEqual(res.termination.t, 0.5, places=9)

    def test_non_terminal_events_are_recorded(self):
        opts = gd.IntegratorOptions(step=1e-2)
        ev = gd.Event("Cross", lambda t, x: math.sin(x[0]), terminal=False)
        res = gd.integrate(lambda t, x: np.ones(1), [0.5], "forward", opts, [ev], horizon=7.0)
        self.assertEqual(res.termination.reason, "Horizon")
        times = [h.t for h in res.hits]
        self.assertEqual(len(times), 2)
        self.assertAlmostEqual(times[0], math.pi - 0.5, places=8)
        self.assertAlmostEqual(times[1], 2 * math.pi - 0.5, places=8)

    def test_switch_cuts_the_step_and_restarts(self):
        # dx/dt = +1 until x reaches 0.5, then -1; steps straddle the switch
        mode = [1.0]

        def flip(t, x):
            mode[0] = -mode[0]

        ev = gd.Event("Flip", lambda t, x: x[0] - 0.5, terminal=False, on_switch=flip)
        opts = gd.IntegratorOptions(step=0.3)
        res = gd.integrate(lambda t, x: np.array([mode[0]]), [0.0], "forward", opts, [ev], horizon=1.0)
        self.assertEqual(res.termination.reason, "Horizon")
        self.assertEqual([h.name for h in res.hits], ["Flip"])
        self.assertAlmostEqual(res.hits[0].t, 0.5, places=9)
        self.assertTrue(np.any(np.abs(res.t - 0.5) < 1e-9))
        self.assertAlmostEqual(float(res.t[-1]), 1.0, places=9)
        self.assertAlmostEqual(float(res.x[-1, 0]), 0.0, places=9)

    def test_switch_point_does_not_fire_twice(self):
        flips = []
        ev = gd.Event("Flip", lambda t, x: math.sin(x[0]), terminal=False, on_switch=lambda t, x: flips.append(t))
        opts = gd.IntegratorOptions(step=1e-2)
        res = gd.integrate(lambda t, x: np.ones(1), [0.5], "forward", opts, [ev], horizon=7.0)
        self.assertEqual(len(flips), 2)
        self.assertAlmostEqual(flips[0], math.pi - 0.5, places=8)
        self.assertAlmostEqual(float(res.x[-1, 0]), 7.5, places=8)

    def test_confirm_can_veto(self):
        opts = gd.IntegratorOptions(step=1e-2)
        ev = gd.Event("Vetoed", lambda t, x: x[0] - 0.505, confirm=lambda t, x: False)
        res = gd.integrate(lambda t, x: np.ones(1), [0.0], "forward", opts, [ev], horizon=1.0)
        self.assertEqual(res.termination.reason, "Horizon")
        self.assertEqual(res.hits, ())

    def test_event_starting_on_zero_is_ignored(self):
        opts = gd.IntegratorOptions(step=1e-2)
        ev = gd.Event("Start", lambda t, x: x[0])
        res = gd.integrate(lambda t, x: np.ones(1), [0.0], "forward", opts, [ev], horizon=0.5)
        self.assertEqual(res.termination.reason, "Horizon")

    def test_zero_horizon_keeps_initial_row(self):
        res = gd.integrate(lambda t, x: -x, [2.0], "forward", horizon=0.0)
        self.assertEqual(res.x.shape, (1, 1))
        self.assertEqual(res.termination.reason, "Horizon")

    def test_non_finite_state_raises_with_partial_trajectory(self):
        opts = gd.IntegratorOptions(step=0.1)

        def rhs(t, x):
            return np.array([math.inf]) if t >= 0.25 else np.ones(1)

        with self.assertRaises(gd.NumericalFailure) as ctx:
            gd.integrate(rhs, [0.0], "forward", opts, horizon=1.0)
        self.assertGreaterEqual(len(ctx.exception.partial_t), 1)
        self.assertEqual(len(ctx.exception.partial_t), len(ctx.exception.partial_x))

    def test_failure_carries_events_recorded_so_far(self):
        opts = gd.IntegratorOptions(step=0.1)

        def rhs(t, x):
            return np.array([math.inf]) if t >= 0.25 else np.ones(1)

        ev = gd.Event("Cross", lambda t, x: x[0] - 0.15, terminal=False)
        with self.assertRaises(gd.NumericalFailure) as ctx:
            gd.integrate(rhs, [0.0], "forward", opts, [ev], horizon=1.0)
        self.assertEqual([h.name for h in ctx.exception.hits], ["Cross"])
        self.assertAlmostEqual(ctx.exception.hits[0].t, 0.15, places=9)

    def test_bad_direction(self):
        with self.assertRaises(ValueError):
            gd.integrate(lambda t, x: x, [1.0], "sideways")

    def test_normalize_adjoint(self):
        out = gd.normalize_adjoint(np.array([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_allclose(out, [1.0, 2.0, 0.6, 0.8])
        with self.assertRaises(gd.NumericalFailure):
            gd.normalize_adjoint(np.array([1.0, 2.0, 0.0, 0.0]))


class TrajectoryCsvTests(unittest.TestCase):
    def test_header_and_full_precision(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "traj.csv"
            gd.write_trajectory_csv(path, [0.0, 0.1], [[1.0 / 3.0, 0.0], [0.5, 1.0]], ["delta", "omega"])
            with open(path, newline="", encoding="utf-8") as f:
                rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["t", "delta", "omega"])
        self.assertEqual(len(rows), 3)
        self.assertEqual(float(rows[1][1]), 1.0 / 3.0)

    def test_length_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ValueError):
                gd.write_trajectory_csv(Path(tmp) / "x.csv", [0.0], [[1.0], [2.0]], ["delta"])


if __name__ == "__main__":
    unittest.main()
