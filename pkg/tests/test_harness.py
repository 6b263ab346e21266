from dataclasses import fields
from pathlib import Path
import json
import tempfile
import unittest

from demonstrators import ATTACK_CLOSEST, ATTACK_WEAKEST
from engine import UnitSpec
from harness import (
    EXIT_CONFIG,
    EXIT_OK,
    BattleRecord,
    EvalReport,
    Matchup,
    MissingLogs,
    ablation_holds,
    cross_validation_run,
    demonstration_policy,
    evaluate,
    fewer_overkills,
    invalid_attack_ratio,
    main,
)
from learner import ConfigError, TrainConfig
from network import NetConfig
from scenario import BUILTIN, Roster, Scenario, Stream
from tests.fixtures import HOLD_POLICY, TWO_EQUILIBRIA


def overkill_scenario() -> Scenario:
    # Two 3-damage allies against one 2-hp enemy: the second hit is wasted.
    weak = UnitSpec(max_hp=40, damage=3, weapon_range=4, velocity=1, max_cooldown=2)
    target = UnitSpec(max_hp=2, damage=1, weapon_range=4, velocity=1, max_cooldown=0)
    return Scenario("overkill", (5, 3), Roster(2, weak, (1, 1), 1), Roster(1, target, (3, 1), 0))


def report(win_rate: float, records=None) -> EvalReport:
    return EvalReport("s", "a", "b", 0, 1, win_rate, 0.0, 0.0, records or [])


def recording_spawns(scenario: Scenario, calls: list) -> Scenario:
    """A copy of `scenario` that logs every (seed, index, stream) it spawns."""

    class Recording(Scenario):
        def spawn(self, seed=None, index=0, stream=Stream.EVALUATION):
            calls.append((seed, index, stream))
            return super().spawn(seed, index, stream)

    return Recording(**{f.name: getattr(scenario, f.name) for f in fields(scenario)})


class TestEvaluate(unittest.TestCase):
    def test_deterministic(self):
        scenario = BUILTIN["m1v1"]
        first = evaluate(ATTACK_CLOSEST, ATTACK_WEAKEST, scenario, battles=3, seed=4)
        second = evaluate(ATTACK_CLOSEST, ATTACK_WEAKEST, scenario, battles=3, seed=4)
        self.assertEqual(first.to_dict(), second.to_dict())
        self.assertAlmostEqual(first.win_rate, sum(r.win for r in first.records) / 3)
        self.assertAlmostEqual(
            first.mean_normalized_reward, sum(r.normalized_reward for r in first.records) / 3
        )
        for r in first.records:
            self.assertLessEqual(abs(r.normalized_reward), 1.0)
        self.assertEqual(EvalReport.from_dict(json.loads(first.to_json())), first)

    def test_holding_never_wins(self):
        result = evaluate(HOLD_POLICY, ATTACK_CLOSEST, BUILTIN["m1v1"], battles=2, seed=0)
        self.assertEqual(result.win_rate, 0.0)
        self.assertEqual(result.mean_normalized_reward, -1.0)
        self.assertEqual(result.invalid_attack_ratio, 0.0)

    def test_overkill_ratio(self):
        result = evaluate(ATTACK_CLOSEST, ATTACK_CLOSEST, overkill_scenario(), battles=2, seed=0)
        self.assertEqual(result.win_rate, 1.0)
        for r in result.records:
            self.assertEqual((r.attacks, r.invalid_attacks, r.steps), (2, 1, 1))
        self.assertEqual(result.invalid_attack_ratio, 0.5)

    def test_ratio_needs_logs(self):
        missing = BattleRecord(0, True, 5, 0.1, 10, None, None)
        with self.assertRaises(MissingLogs):
            invalid_attack_ratio(report(1.0, [missing]))
        quiet = BattleRecord(0, False, -5, -0.1, 10, 0, 0)
        self.assertEqual(invalid_attack_ratio(report(0.0, [quiet])), 0.0)

    def test_bad_battle_count(self):
        with self.assertRaises(ValueError):
            evaluate(ATTACK_CLOSEST, ATTACK_WEAKEST, BUILTIN["m1v1"], battles=0, seed=0)


class TestComparisons(unittest.TestCase):
    def test_ablation_ordering(self):
        self.assertTrue(ablation_holds({"full": report(0.8), "q_demo_only": report(0.82), "q_theta_only": report(0.5)}))
        self.assertFalse(ablation_holds({"full": report(0.6), "q_demo_only": report(0.8), "q_theta_only": report(0.5)}))
        self.assertFalse(ablation_holds({"full": report(0.8), "q_demo_only": report(0.8), "q_theta_only": report(0.75)}))

    def test_matchup(self):
        self.assertTrue(Matchup("closest", "weakest", report(0.7), report(0.5)).improved())
        self.assertFalse(Matchup("closest", "weakest", report(0.6), report(0.5)).improved())

    def test_overkill_check_needs_attacks(self):
        quiet = evaluate(HOLD_POLICY, ATTACK_CLOSEST, BUILTIN["m1v1"], battles=2, seed=0)
        wasteful = evaluate(ATTACK_CLOSEST, ATTACK_CLOSEST, overkill_scenario(), battles=2, seed=0)
        self.assertEqual(quiet.invalid_attack_ratio, 0.0)
        self.assertFalse(fewer_overkills(quiet, wasteful))
        careful = BattleRecord(0, True, 5, 0.1, 10, 4, 1)
        self.assertTrue(fewer_overkills(report(1.0, [careful]), wasteful))
        self.assertFalse(fewer_overkills(wasteful, wasteful))

    def test_demonstration_modality(self):
        scenario = BUILTIN["m1v1"]
        self.assertIs(demonstration_policy("weakest", ATTACK_CLOSEST, scenario, "H", 0), ATTACK_WEAKEST)
        with self.assertRaises(ConfigError):
            demonstration_policy("weakest", ATTACK_CLOSEST, scenario, "X", 0)


class TestCrossValidation(unittest.TestCase):
    def test_training_and_evaluation_use_separate_streams(self):
        calls = []
        scenario = recording_spawns(BUILTIN["m1v1"], calls)
        cfg = TrainConfig(total_steps=4, seed=0)
        matchups = cross_validation_run(scenario, cfg, battles=2, seed=0, net_config=NetConfig(hidden=(8,)))
        self.assertEqual(len(matchups), 2)
        training = {c for c in calls if c[2] is Stream.TRAINING}
        evaluation = {c for c in calls if c[2] is Stream.EVALUATION}
        self.assertTrue(training)
        self.assertEqual(evaluation, {(0, 0, Stream.EVALUATION), (0, 1, Stream.EVALUATION)})
        self.assertEqual(len(training) + len(evaluation), len(set(calls)))


class TestCommandLine(unittest.TestCase):
    def test_oracle_random(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["--out", tmp, "--seed", "3", "oracle-pne", "--random", "2", "3", "--check"])
            result = json.loads((Path(tmp) / "oracle_pne.json").read_text())
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(result["actions"], [2, 3])
        self.assertTrue(result["agrees"])

    def test_oracle_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            payoffs = Path(tmp) / "payoffs.txt"
            payoffs.write_text(TWO_EQUILIBRIA)
            code = main(["--out", tmp, "oracle-pne", "--payoffs", str(payoffs), "--check"])
            result = json.loads((Path(tmp) / "oracle_pne.json").read_text())
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(result["pne"], [[0, 0], [1, 1]])
        self.assertEqual(result["best_response"], [0, 0])

    def test_evaluate_writes_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["--scenario", "m1v1", "--out", tmp, "--seed", "1", "evaluate", "--battles", "2"])
            data = json.loads((Path(tmp) / "eval.json").read_text())
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(data["battles"], 2)
        self.assertEqual(data["allied"], "closest")
        self.assertEqual(len(data["records"]), 2)

    def test_configuration_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(main(["--scenario", str(Path(tmp) / "none.yaml"), "--out", tmp, "oracle-pne"]), EXIT_CONFIG)
            config = Path(tmp) / "train.yaml"
            config.write_text("learning_rat: 0.1\n")
            self.assertEqual(main(["--config", str(config), "--out", tmp, "lemma1"]), EXIT_CONFIG)


if __name__ == "__main__":
    unittest.main()
