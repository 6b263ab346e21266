from pathlib import Path
import csv
import tempfile
import unittest

import numpy as np

from demonstrators import ATTACK_CLOSEST
from engine import HOLD, Action, ActionSpace, features
from learner import (
    ConfigError,
    ObjectivePolicy,
    TrainConfig,
    Trainer,
    load_train_config,
    new_network,
    objective_distribution,
    scale_invariance_check,
    train,
    train_config_from_dict,
)
from network import NetConfig, NonFiniteLoss, forward, load_checkpoint
from tests.fixtures import DUEL_ALLY, DUEL_ENEMY, duel_scenario, duel_state, make_state


class TestObjective(unittest.TestCase):
    def test_min_shift(self):
        np.testing.assert_allclose(objective_distribution([1.0, 2.0, 3.0]), [0.0, 1 / 3, 2 / 3])
        np.testing.assert_allclose(objective_distribution([-4.0, 6.0]), [0.0, 1.0])
        np.testing.assert_allclose(objective_distribution([7.0, 7.0, 7.0, 7.0]), np.full(4, 0.25))

    def test_worked_examples(self):
        np.testing.assert_allclose(objective_distribution([0.51, 0.49]), [1.0, 0.0])
        np.testing.assert_allclose(objective_distribution([3.0, 1.0, 0.0]), [0.75, 0.25, 0.0])

    def test_positive_affine_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            q = rng.normal(size=int(rng.integers(2, 10))) * 10
            self.assertTrue(scale_invariance_check(q, c=float(rng.uniform(0.1, 5.0)), shift=float(rng.normal())))
            self.assertTrue(scale_invariance_check(q, c=0.37))
        with self.assertRaises(ValueError):
            scale_invariance_check(np.ones(3), c=0.0)

    def test_spread_over_action_space(self):
        policy = ObjectivePolicy([Action.attack(0), HOLD], np.array([0.75, 0.25]))
        np.testing.assert_allclose(policy.full(ActionSpace(2)), [0, 0, 0, 0, 0.75, 0, 0.25])
        self.assertEqual(policy.argmax(), Action.attack(0))


class TestConfig(unittest.TestCase):
    def test_validation(self):
        self.assertEqual(TrainConfig(total_steps=7).stage_switch, 3)
        self.assertEqual(TrainConfig(total_steps=10, early_stage_fraction=0.0).stage_switch, 0)
        for bad in (
            {"learning_rate": 0.0},
            {"early_stage_fraction": 1.5},
            {"iterations": 0},
            {"minibatch_size": -1},
            {"backing": "q_best"},
        ):
            with self.assertRaises(ConfigError):
                TrainConfig(**bad)

    def test_from_dict(self):
        cfg = train_config_from_dict({"learning_rate": 0.01, "total_steps": 100, "backing": "q_demo_only"})
        self.assertEqual(cfg.learning_rate, 0.01)
        self.assertEqual(cfg.total_steps, 100)
        self.assertEqual(cfg.backing, "q_demo_only")
        with self.assertRaises(ConfigError):
            train_config_from_dict({"learning_rat": 0.01})
        with self.assertRaises(ConfigError):
            train_config_from_dict({"total_steps": "many"})

    def test_from_dict_types_are_exact(self):
        cfg = train_config_from_dict({"discount": 1, "early_exit": False})
        self.assertIsInstance(cfg.discount, float)
        self.assertFalse(cfg.early_exit)
        for bad in (
            {"early_exit": "false"},
            {"early_exit": 0},
            {"total_steps": 2.9},
            {"total_steps": True},
            {"learning_rate": "0.01"},
            {"learning_rate": True},
            {"backing": 1},
        ):
            with self.assertRaises(ConfigError):
                train_config_from_dict(bad)

    def test_yaml(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "train.yaml"
            path.write_text("learning_rate: 0.002\ndiscount: 0.99\nminibatch_size: 16\n")
            cfg = load_train_config(path)
            path.write_text("[1, 2]\n")
            with self.assertRaises(ConfigError):
                load_train_config(path)
        self.assertEqual(cfg, TrainConfig(learning_rate=0.002, discount=0.99, minibatch_size=16))

    def test_shipped_config_is_the_default(self):
        self.assertEqual(load_train_config(Path(__file__).parent.parent / "configs" / "train.yaml"), TrainConfig())


class TestTraining(unittest.TestCase):
    def test_learns_to_attack(self):
        cfg = TrainConfig(learning_rate=0.05, total_steps=100, seed=2)
        net_config = NetConfig(hidden=(16, 16))
        with tempfile.TemporaryDirectory() as tmp:
            log_path = Path(tmp) / "train_log.csv"
            checkpoint = Path(tmp) / "policy.npz"
            result = train(
                duel_scenario(), ATTACK_CLOSEST, ATTACK_CLOSEST, cfg, net_config,
                log_path=log_path, checkpoint_path=checkpoint,
            )
            with open(log_path, newline="") as f:
                rows = list(csv.DictReader(f))
            saved = load_checkpoint(checkpoint)

        self.assertEqual(result.steps, 100)
        self.assertEqual(result.stage_switch_step, 50)
        self.assertEqual(len(rows), len(result.log))
        self.assertEqual(rows[0]["stage"], "pne")
        self.assertEqual(result.log[0].steps, 2)
        self.assertTrue(result.log[0].win)
        self.assertEqual(result.log[0].reward, 10)

        probs = forward(result.net, features(duel_state(), 0))
        self.assertGreater(probs[ActionSpace(1).index(Action.attack(0))], 0.5)
        np.testing.assert_array_equal(forward(saved, features(duel_state(), 0)), probs)

    def test_zero_budget_returns_the_initial_network(self):
        net = new_network(duel_scenario(), NetConfig(hidden=(8,), zero_output=False))
        before = net.copy()
        result = train(duel_scenario(), ATTACK_CLOSEST, ATTACK_CLOSEST, TrainConfig(total_steps=0), net=net)
        self.assertEqual((result.steps, result.log, result.stage_switch_step), (0, [], None))
        self.assertIs(result.net, net)
        for name, value in before.params.items():
            np.testing.assert_array_equal(net.params[name], value)
        for name, value in before.stats.items():
            np.testing.assert_array_equal(net.stats[name], value)

    def test_step_does_not_grow_with_the_batch(self):
        wounded = make_state([(0, 0)], [(1, 0, 5)], extent=(2, 1), ally_spec=DUEL_ALLY, enemy_spec=DUEL_ENEMY)
        pair = [features(duel_state(), 0), features(wounded, 0)]
        targets = [np.eye(6)[4], np.full(6, 1 / 6)]
        nets = []
        for copies in (1, 4):
            net = new_network(duel_scenario(), NetConfig(hidden=(8,), zero_output=False))
            trainer = Trainer(duel_scenario(), ATTACK_CLOSEST, ATTACK_CLOSEST, TrainConfig(learning_rate=0.1), net)
            trainer.update(pair * copies, targets * copies)
            nets.append(net)
        for name, value in nets[0].params.items():
            np.testing.assert_allclose(nets[1].params[name], value, rtol=1e-6, atol=1e-12)

    def test_divergence_keeps_last_good(self):
        cfg = TrainConfig(total_steps=10)
        net = new_network(duel_scenario(), NetConfig(hidden=(8,)))
        with tempfile.TemporaryDirectory() as tmp:
            checkpoint = Path(tmp) / "policy.npz"
            trainer = Trainer(duel_scenario(), ATTACK_CLOSEST, ATTACK_CLOSEST, cfg, net, checkpoint_path=checkpoint)
            net.params["w0"][0, 0] = np.nan
            x = features(duel_state(), 0)
            with self.assertRaises(NonFiniteLoss):
                trainer.update([x, x], [np.eye(6)[4], np.eye(6)[4]])
            restored = load_checkpoint(checkpoint)
        self.assertTrue(np.all(np.isfinite(restored.params["w0"])))


if __name__ == "__main__":
    unittest.main()
