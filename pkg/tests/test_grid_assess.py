import csv
import json
import math
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
from shapely.geometry import box

import grid_assess as ga
import grid_barrier as gb
import grid_dynamics as gd
import grid_loadsets as gl
import grid_model as gm

DATA_DIR = Path(__file__).resolve().parents[1] / "data"
FAST = gd.IntegratorOptions(step=1e-2)


def read_json(name):
    with open(DATA_DIR / name, encoding="utf-8") as f:
        return json.load(f)


def band_region(node_id="g"):
    """Synthetic MRPI-like region on [-1, 1]: the band between two straight barriers."""
    doc = {
        "nodes": [
            {"id": node_id, "kind": "generator", "m": 1.0, "k": 1.0, "p_m": 0.0, "delta_min": -1.0, "delta_max": 1.0},
            {"id": "r", "kind": "reference"},
        ],
        "edges": [{"i": node_id, "j": "r", "a": 1.0}],
    }
    node = gm.decouple(gm.grid_from_document(doc), node_id)
    curves = []
    for side, pts in ((gb.UPPER, [(1.0, 0.0), (-1.0, 1.0)]), (gb.LOWER, [(-1.0, 0.0), (1.0, -1.0)])):
        x = np.zeros((2, 4))
        x[:, :2] = pts
        curves.append(gb.BarrierCurve(node_id, gd.SetKind.MRPI, side, np.array([0.0, -1.0]), x,
                                      "ClosedOnOtherConstraint", 0.0))
    return gb.assemble_region(node, curves, "mrpi")


class StateParsingTests(unittest.TestCase):
    def setUp(self):
        self.grid = gm.load_grid(DATA_DIR / "six_bus.json")

    def test_fixture_parses(self):
        x = ga.parse_state(read_json("six_bus_fault_state.json"), self.grid)
        self.assertEqual(x.ids(), ["1", "2", "3", "4", "5"])
        self.assertEqual(x["1"], ga.NodeState(1.2, 2.5))
        self.assertIsNone(x["5"].omega)
        self.assertEqual(ga.state_to_document(x), read_json("six_bus_fault_state.json"))

    def test_rejections(self):
        base = read_json("six_bus_settling_state.json")
        cases = {
            "missing node": ({k: v for k, v in base.items() if k != "3"}, "missing node"),
            "unknown node": (dict(base, **{"9": {"delta": 0.0}}), "unknown"),
            "reference node": (dict(base, **{"6": {"delta": 0.0}}), "reference"),
            "generator without omega": (dict(base, **{"2": {"delta": 0.0}}), "missing omega"),
            "load with omega": (dict(base, **{"5": {"delta": 0.0, "omega": 0.1}}), "no omega"),
            "non-numeric": (dict(base, **{"5": {"delta": "x"}}), "expected a number"),
        }
        for name, (doc, needle) in cases.items():
            with self.subTest(name):
                with self.assertRaisesRegex(ga.StateError, needle):
                    ga.parse_state(doc, self.grid)


class VerdictTests(unittest.TestCase):
    def test_worst_verdict(self):
        V = ga.Verdict
        self.assertIs(ga.worst_verdict([V.SAFE, V.POTENTIALLY_SAFE]), V.POTENTIALLY_SAFE)
        self.assertIs(ga.worst_verdict([V.SAFE, V.UNSAFE, V.POTENTIALLY_SAFE]), V.UNSAFE)
        self.assertIsNone(ga.worst_verdict([]))

    def test_interval_membership(self):
        iv = gl.LoadInterval("l", gd.SetKind.MRPI, -1.0, 1.0, True, True, 0.01)
        self.assertIs(ga.interval_membership(iv, 0.0), gb.Membership.INSIDE)
        self.assertIs(ga.interval_membership(iv, 1.0 + 1e-8), gb.Membership.BOUNDARY)
        self.assertIs(ga.interval_membership(iv, -1.5), gb.Membership.OUTSIDE)
        empty = gl.LoadInterval("l", gd.SetKind.MRPI, None, 1.0, False, True, 0.01)
        self.assertIs(ga.interval_membership(empty, 0.0), gb.Membership.OUTSIDE)


class ClassifyTests(unittest.TestCase):
    """Classification against hand-built sets: one generator and one load."""

    def setUp(self):
        doc = {
            "nodes": [
                {"id": "g", "kind": "generator", "m": 1.0, "k": 1.0, "p_m": 0.0, "delta_min": -1.0, "delta_max": 1.0},
                {"id": "l", "kind": "load", "k": 1.0, "p_d": 0.0, "delta_min": -1.0, "delta_max": 1.0},
                {"id": "r", "kind": "reference"},
            ],
            "edges": [{"i": "g", "j": "r", "a": 1.0}, {"i": "l", "j": "r", "a": 1.0}],
        }
        self.grid = gm.grid_from_document(doc)
        band = band_region("g")
        # admissible: the whole box
        whole = gb.Region("g", gd.SetKind.ADMISSIBLE, box(-1.0, -10.0, 1.0, 10.0), "OK", (-1.0, 1.0, 10.0))
        self.sets = {
            "g": ga.NodeSets("g", gm.GENERATOR, {gd.SetKind.MRPI: band, gd.SetKind.ADMISSIBLE: whole}),
            "l": ga.NodeSets("l", gm.LOAD, {
                gd.SetKind.MRPI: gl.LoadInterval("l", gd.SetKind.MRPI, -0.5, 0.5, True, True, 0.01),
                gd.SetKind.ADMISSIBLE: gl.LoadInterval("l", gd.SetKind.ADMISSIBLE, -1.0, 1.0, True, True, 0.01),
            }),
        }

    def state(self, g, l):
        return ga.PostFaultState({"g": ga.NodeState(*g), "l": ga.NodeState(l)})

    def test_safe(self):
        a = ga.classify_state(self.grid, self.sets, self.state((0.0, 0.0), 0.0))
        self.assertIs(a.verdict, ga.Verdict.SAFE)
        self.assertEqual(a.critical_nodes, ())

    def test_potentially_safe_names_the_node(self):
        a = ga.classify_state(self.grid, self.sets, self.state((0.0, 2.0), 0.0))
        self.assertIs(a.verdict, ga.Verdict.POTENTIALLY_SAFE)
        self.assertEqual(a.critical_nodes, ("g",))
        self.assertEqual(a.per_node["g"], ga.NodeMembership(in_mrpi=False, in_admissible=True))

    def test_boundary_is_admissible_but_not_safe(self):
        a = ga.classify_state(self.grid, self.sets, self.state((0.0, 0.0), 0.5))
        self.assertIs(a.verdict, ga.Verdict.POTENTIALLY_SAFE)
        self.assertEqual(a.critical_nodes, ("l",))

    def test_unsafe(self):
        a = ga.classify_state(self.grid, self.sets, self.state((0.0, 0.0), 1.2))
        self.assertIs(a.verdict, ga.Verdict.UNSAFE)
        self.assertEqual(a.critical_nodes, ("l",))
        doc = a.to_document()
        self.assertEqual(doc["verdict"], "Unsafe")
        self.assertEqual(doc["per_node"]["l"], {"in_mrpi": False, "in_admissible": False})

    def test_mismatched_state(self):
        with self.assertRaisesRegex(ga.StateError, "missing l"):
            ga.classify_state(self.grid, self.sets, ga.PostFaultState({"g": ga.NodeState(0.0, 0.0)}))

    def test_missing_sets(self):
        sets = dict(self.sets)
        del sets["l"]
        with self.assertRaisesRegex(ga.StateError, "no MRPI/admissible sets"):
            ga.classify_state(self.grid, sets, self.state((0.0, 0.0), 0.0))

    def test_screen_keeps_order(self):
        states = [self.state((0.0, 0.0), 0.0), self.state((0.0, 0.0), 1.2), self.state((0.0, 2.0), 0.0)]
        verdicts = [a.verdict for a in ga.screen(self.grid, self.sets, states, workers=2)]
        self.assertEqual(verdicts, [ga.Verdict.SAFE, ga.Verdict.UNSAFE, ga.Verdict.POTENTIALLY_SAFE])
        self.assertEqual(ga.screen(self.grid, self.sets, []), [])


class SimulationTests(unittest.TestCase):
    def setUp(self):
        self.grid = gm.load_grid(DATA_DIR / "six_bus.json")

    def test_fault_state_violates_on_generator_one_only(self):
        x0 = ga.parse_state(read_json("six_bus_fault_state.json"), self.grid)
        traj = ga.simulate_postfault(self.grid, x0, 5.0, FAST)
        self.assertEqual({v.node for v in traj.violations}, {"1"})
        first = traj.first_violation
        self.assertEqual(first.bound, "upper")
        self.assertGreater(first.t, 0.0)
        self.assertLess(first.t, 1.0)

    def test_settling_state_stays_inside(self):
        x0 = ga.parse_state(read_json("six_bus_settling_state.json"), self.grid)
        traj = ga.simulate_postfault(self.grid, x0, 20.0, FAST)
        self.assertEqual(traj.violations, ())
        self.assertIsNone(traj.first_violation)
        self.assertEqual(traj.node_series("1").shape[1], 2)
        self.assertEqual(traj.node_series("5").shape[1], 1)

    def test_zero_horizon_gives_one_row(self):
        x0 = ga.parse_state(read_json("six_bus_settling_state.json"), self.grid)
        traj = ga.simulate_postfault(self.grid, x0, 0.0)
        self.assertEqual(len(traj.times), 1)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "trajectory.csv"
            ga.write_trajectory_long_csv(traj, path)
            with open(path, newline="", encoding="utf-8") as f:
                rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["t", "node", "delta", "omega"])
        self.assertEqual([r[1] for r in rows[1:]], ["1", "2", "3", "4", "5"])
        self.assertEqual(rows[-1][3], "")

    def test_initial_violation_is_reported_at_time_zero(self):
        doc = read_json("six_bus_settling_state.json")
        doc["5"] = {"delta": -2.0}
        traj = ga.simulate_postfault(self.grid, ga.parse_state(doc, self.grid), 0.5, FAST)
        self.assertEqual(traj.first_violation, ga.Violation(0.0, "5", "lower"))

    def test_equilibrium_fixture_is_nearly_stationary(self):
        doc = read_json("six_bus_settling_state.json")
        doc["1"] = {"delta": 0.0334, "omega": 0.0}
        self.assertLess(ga.equilibrium_residual(self.grid, ga.parse_state(doc, self.grid)), 1e-3)

    def test_coupled_system_pack_unpack(self):
        system = ga.CoupledSystem(self.grid)
        self.assertEqual(system.size, 9)
        x = ga.parse_state(read_json("six_bus_fault_state.json"), self.grid)
        self.assertEqual(system.unpack(system.pack(x)), x)

    def test_negative_horizon_rejected(self):
        x0 = ga.parse_state(read_json("six_bus_settling_state.json"), self.grid)
        with self.assertRaises(ValueError):
            ga.simulate_postfault(self.grid, x0, -1.0)

    def test_settling_state_stays_inside_for_a_hundred_seconds(self):
        x0 = ga.parse_state(read_json("six_bus_settling_state.json"), self.grid)
        traj = ga.simulate_postfault(self.grid, x0, 100.0, FAST)
        self.assertEqual(traj.violations, ())
        self.assertAlmostEqual(float(traj.times[-1]), 100.0, places=9)

    def test_failure_keeps_violations_seen_before_it(self):
        x0 = ga.parse_state(read_json("six_bus_settling_state.json"), self.grid)
        system = ga.CoupledSystem(self.grid)
        vec0 = system.pack(x0)
        failure = gd.NumericalFailure(
            "non-finite state after t=0.4", 0.4, vec0,
            partial_t=np.array([0.0, 0.2, 0.4]), partial_x=np.tile(vec0, (3, 1)),
            hits=[gd.EventHit("1:upper", 0.3, vec0)],
        )
        with mock.patch("grid_assess.integrate", side_effect=failure):
            with self.assertRaises(gd.NumericalFailure) as ctx:
                ga.simulate_postfault(self.grid, x0, 5.0, FAST, system)
        traj = ctx.exception.trajectory
        self.assertEqual(traj.violations, (ga.Violation(0.3, "1", "upper"),))
        self.assertEqual(len(traj.times), 3)
        self.assertEqual(traj.states.shape, (3, system.size))


class CoupledFieldTests(unittest.TestCase):
    def setUp(self):
        self.grid = gm.load_grid(DATA_DIR / "six_bus.json")
        self.system = ga.CoupledSystem(self.grid)
        self.vec = self.system.pack(ga.parse_state(read_json("six_bus_fault_state.json"), self.grid))

    def test_generator_row_is_the_decoupled_field_at_the_actual_angles(self):
        d1, w1 = 1.2, 2.5
        others = np.array([0.0334, 0.0334, 0.0334, -0.1338])
        expected = (-0.1 * w1 - 0.2 * np.sin(d1 - others).sum() - 2.0 * math.sin(d1) + 0.1) / 1.0
        got = self.system.node_rhs("1", self.vec)
        self.assertAlmostEqual(got[0], w1, places=12)
        self.assertAlmostEqual(got[1], expected, places=12)
        decoupled = gd.generator_rhs(gm.decouple(self.grid, "1"), (d1, w1), others)
        np.testing.assert_allclose(got, decoupled, rtol=0, atol=1e-12)

    def test_load_row_is_the_decoupled_field_at_the_actual_angles(self):
        d5 = -0.1338
        others = np.array([1.2, 0.0334, 0.0334, 0.0334])
        expected = (-0.2 * np.sin(d5 - others).sum() - 2.0 * math.sin(d5) - 0.4) / 4.0
        (got,) = self.system.node_rhs("5", self.vec)
        self.assertAlmostEqual(got, expected, places=12)
        self.assertAlmostEqual(got, gd.load_rhs(gm.decouple(self.grid, "5"), d5, others), places=12)

    def test_synchronized_lossless_grid_does_not_drift(self):
        doc = {
            "nodes": [
                {"id": "a", "kind": "generator", "m": 1.0, "k": 0.5, "p_m": 0.0, "delta_min": -1.0, "delta_max": 1.0},
                {"id": "b", "kind": "generator", "m": 2.0, "k": 0.1, "p_m": 0.0, "delta_min": -1.0, "delta_max": 1.0},
                {"id": "c", "kind": "load", "k": 1.0, "p_d": 0.0, "delta_min": -1.0, "delta_max": 1.0},
                {"id": "r", "kind": "reference", "delta_fixed": 0.3},
            ],
            "edges": [
                {"i": "a", "j": "b", "a": 1.0},
                {"i": "b", "j": "c", "a": 0.5},
                {"i": "a", "j": "r", "a": 2.0},
                {"i": "c", "j": "r", "a": 1.5},
            ],
        }
        grid = gm.grid_from_document(doc)
        x0 = ga.PostFaultState({"a": ga.NodeState(0.3, 0.0), "b": ga.NodeState(0.3, 0.0), "c": ga.NodeState(0.3)})
        self.assertLessEqual(ga.equilibrium_residual(grid, x0), 1e-12)
        traj = ga.simulate_postfault(grid, x0, 10.0, FAST)
        self.assertEqual(traj.violations, ())
        drift = np.abs(traj.states - traj.states[0]).max()
        self.assertLessEqual(drift, 1e-12)


class ProbeTests(unittest.TestCase):
    def test_two_bus_load_push_down_escapes_quickly(self):
        node = gm.decouple(gm.load_grid(DATA_DIR / "two_bus.json"), "2")
        traj = ga.worst_case_probe(node, 0.0, "push_down", 10.0, FAST)
        v = traj.first_violation
        self.assertEqual((v.node, v.bound), ("2", "lower"))
        self.assertLess(v.t, 1.0)
        self.assertEqual(traj.strategy, "push_down")

    def test_pump_is_generator_only(self):
        node = gm.decouple(gm.load_grid(DATA_DIR / "two_bus.json"), "2")
        with self.assertRaises(ValueError):
            ga.worst_case_probe(node, 0.0, "pump")

    def test_start_outside_box_violates_at_zero(self):
        node = gm.decouple(gm.load_grid(DATA_DIR / "six_bus.json"), "2")
        traj = ga.worst_case_probe(node, (2.0, 0.0), "push_up", 1.0, FAST)
        self.assertEqual(traj.first_violation, ga.Violation(0.0, "2", "upper"))
        self.assertEqual(len(traj.times), 1)

    def test_anchored_generator_survives_every_probe_near_equilibrium(self):
        node = gm.decouple(gm.load_grid(DATA_DIR / "anchored_pair.json"), "g")
        self.assertIsNone(ga.probe_escapes(node, (0.2, 0.0), 20.0, FAST))

    def test_probe_csv(self):
        node = gm.decouple(gm.load_grid(DATA_DIR / "two_bus.json"), "1")
        traj = ga.worst_case_probe(node, (0.0, 0.0), "pump", 1.0, FAST)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "probe.csv"
            ga.write_probe_csv(traj, path)
            with open(path, newline="", encoding="utf-8") as f:
                header = next(csv.reader(f))
        self.assertEqual(header, ["t", "delta", "omega"])

    def test_batched_runs_match_single_runs(self):
        node = gm.decouple(gm.load_grid(DATA_DIR / "two_bus.json"), "1")
        rng = np.random.default_rng(5)
        starts = np.column_stack([rng.uniform(-1.5, 1.5, 12), rng.uniform(-3.0, 3.0, 12)])
        starts[0] = (2.0, 0.0)
        for strategy in ga.GENERATOR_STRATEGIES:
            with self.subTest(strategy=strategy):
                mask = ga.batch_escapes(node, starts, strategy, 5.0, FAST)
                single = [ga.worst_case_probe(node, s, strategy, 5.0, FAST).first_violation is not None for s in starts]
                self.assertEqual(mask.tolist(), single)
                self.assertTrue(mask[0])

    def test_batched_runs_are_generator_only(self):
        load = gm.decouple(gm.load_grid(DATA_DIR / "two_bus.json"), "2")
        with self.assertRaises(ValueError):
            ga.batch_escapes(load, [(0.0, 0.0)], "push_up")
        gen = gm.decouple(gm.load_grid(DATA_DIR / "two_bus.json"), "1")
        with self.assertRaises(ValueError):
            ga.batch_escapes(gen, [(0.0, 0.0)], "sideways")


class CrossCheckTests(unittest.TestCase):
    def test_counts_and_document(self):
        grid = gm.load_grid(DATA_DIR / "anchored_pair.json")
        node = gm.decouple(grid, "g")
        region = gb.compute_region(node, "mrpi", FAST)
        messages = []
        check = ga.cross_check_region(node, region, FAST, grid_size=4, horizon=5.0,
                                      log_fn=lambda lvl, msg: messages.append(lvl))
        self.assertEqual(check.samples, 16)
        self.assertLessEqual(check.checked, 16)
        self.assertLessEqual(len(check.disagreements), check.checked)
        doc = check.to_document()
        self.assertEqual(doc["kind"], "mrpi")
        self.assertEqual(len(doc["disagreements"]), len(check.disagreements))
        if check.disagreements:
            self.assertEqual(messages, ["WARN"])

    def test_weakly_damped_generator_escapes_from_every_sample(self):
        node = gm.decouple(gm.load_grid(DATA_DIR / "six_bus.json"), "1")
        region = gb.compute_region(node, "mrpi")
        self.assertTrue(region.empty)
        check = ga.cross_check_region(node, region, FAST, grid_size=20)
        self.assertEqual(check.samples, 400)
        self.assertEqual(check.checked, 400)
        self.assertEqual(check.disagreements, ())

    def test_admissible_check_covers_outside_samples(self):
        node = gm.decouple(gm.load_grid(DATA_DIR / "two_bus.json"), "1")
        region = gb.compute_region(node, "admissible", FAST)
        check = ga.cross_check_region(node, region, FAST, grid_size=6, horizon=5.0)
        self.assertIs(check.kind, gd.SetKind.ADMISSIBLE)
        self.assertGreater(check.checked, 0)
        self.assertLessEqual(check.checked, 36)


class AnchoredPairTests(unittest.TestCase):
    """Strongly anchored two-node grid: equilibrium is a Safe post-fault state."""

    @classmethod
    def setUpClass(cls):
        cls.grid = gm.load_grid(DATA_DIR / "anchored_pair.json")
        cls.sets = {nid: ga.compute_node_sets(cls.grid, nid) for nid in cls.grid.node_ids()}

    def test_sets_cover_both_kinds(self):
        self.assertIsInstance(self.sets["g"].mrpi, gb.Region)
        self.assertIsInstance(self.sets["l"].admissible, gl.LoadInterval)
        self.assertEqual(self.sets["l"].node_kind, gm.LOAD)

    def test_near_equilibrium_is_safe(self):
        x = ga.PostFaultState({"g": ga.NodeState(0.2, 0.0), "l": ga.NodeState(-0.2)})
        a = ga.classify_state(self.grid, self.sets, x)
        self.assertIs(a.verdict, ga.Verdict.SAFE)

    def test_far_state_is_not_safe(self):
        x = ga.PostFaultState({"g": ga.NodeState(1.5, 5.0), "l": ga.NodeState(-0.2)})
        a = ga.classify_state(self.grid, self.sets, x)
        self.assertIsNot(a.verdict, ga.Verdict.SAFE)
        self.assertIn("g", a.critical_nodes)


if __name__ == "__main__":
    unittest.main()
