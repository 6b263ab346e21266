from pathlib import Path
import tempfile
import unittest

import numpy as np

from engine import ActionSpace, feature_size, features
from network import (
    DimensionMismatch,
    NetConfig,
    NetworkPolicy,
    NonFiniteLoss,
    PolicyNetwork,
    forward,
    kl_loss,
    load_checkpoint,
    policy_gradient,
    save_checkpoint,
    _scale_inputs,
    update_statistics,
)
from tests.fixtures import make_state


def _random_problem(seed: int) -> tuple[PolicyNetwork, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    net = PolicyNetwork(6, 5, NetConfig(hidden=(8, 8), zero_output=False, seed=seed))
    for i in range(net.depth):
        net.stats[f"mean{i}"] = rng.normal(size=8)
        net.stats[f"var{i}"] = rng.uniform(0.5, 2.0, size=8)
        net.params[f"gamma{i}"] = rng.uniform(0.5, 1.5, size=8)
        net.params[f"beta{i}"] = rng.normal(scale=0.1, size=8)
    x = rng.normal(size=(4, 6))
    targets = rng.dirichlet(np.ones(5), size=4)
    targets[0] = [0.0, 1.0, 0.0, 0.0, 0.0]
    return net, x, targets


class TestForward(unittest.TestCase):
    def test_initial_policy_is_uniform(self):
        net = PolicyNetwork(12, 7)
        probs = forward(net, np.arange(12.0))
        self.assertEqual(probs.shape, (7,))
        np.testing.assert_allclose(probs, np.full(7, 1 / 7))

    def test_rows_are_distributions(self):
        net, x, _ = _random_problem(0)
        probs = forward(net, x)
        self.assertEqual(probs.shape, (4, 5))
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(4))
        self.assertTrue(np.all(probs > 0))

    def test_dimension_checks(self):
        net, x, targets = _random_problem(0)
        with self.assertRaises(DimensionMismatch):
            forward(net, np.zeros(5))
        with self.assertRaises(DimensionMismatch):
            kl_loss(net, x, targets[:, :4])

    def test_non_finite(self):
        net, x, targets = _random_problem(0)
        net.params["w0"][0, 0] = np.nan
        with self.assertRaises(NonFiniteLoss):
            kl_loss(net, x, targets)
        with self.assertRaises(NonFiniteLoss):
            policy_gradient(net, x, targets)

    def test_zero_targets_take_no_log(self):
        net = PolicyNetwork(3, 4, NetConfig(hidden=(4,), zero_output=False))
        net.params["b1"] = np.array([0.0, -1e6, 0.0, 0.0])
        loss = kl_loss(net, np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))
        self.assertAlmostEqual(loss, np.log(3))


class TestGradient(unittest.TestCase):
    def test_matches_finite_differences(self):
        eps = 1e-6
        for seed in range(20):
            net, x, targets = _random_problem(seed)
            grads = policy_gradient(net, x, targets)
            for name, param in net.params.items():
                numeric = np.zeros_like(param)
                for idx in np.ndindex(param.shape):
                    saved = param[idx]
                    param[idx] = saved + eps
                    up = -kl_loss(net, x, targets)
                    param[idx] = saved - eps
                    down = -kl_loss(net, x, targets)
                    param[idx] = saved
                    numeric[idx] = (up - down) / (2 * eps)
                err = np.linalg.norm(grads[name] - numeric) / max(np.linalg.norm(grads[name] + numeric), 1e-12)
                self.assertLess(err, 1e-4, f"seed {seed}, {name}")


class TestStatistics(unittest.TestCase):
    def test_first_batch_sets_statistics(self):
        rng = np.random.default_rng(3)
        net = PolicyNetwork(3, 2, NetConfig(hidden=(4,), input_scaling=False, seed=1))
        x = rng.normal(size=(5, 3))
        z = x @ net.params["w0"] + net.params["b0"]
        update_statistics(net, x)
        np.testing.assert_allclose(net.stats["mean0"], z.mean(axis=0))
        np.testing.assert_allclose(net.stats["var0"], z.var(axis=0))
        update_statistics(net, x)
        np.testing.assert_allclose(net.stats["mean0"], z.mean(axis=0))
        self.assertEqual(float(net.stats["batches"]), 2.0)

    def test_inputs_are_scaled_by_their_statistics(self):
        x = np.array([[40.0, 0.0, 1.0], [40.0, 10.0, 1.1], [40.0, 20.0, 1.2]])
        net = PolicyNetwork(3, 2, NetConfig(hidden=(4,), seed=2))
        update_statistics(net, x)
        np.testing.assert_allclose(net.stats["input_mean"], x.mean(axis=0))
        np.testing.assert_allclose(net.stats["input_var"], x.var(axis=0))
        scaled = _scale_inputs(net, x)
        # Constant and low-variance columns are centered, never amplified.
        np.testing.assert_allclose(scaled[:, 0], 0.0)
        np.testing.assert_allclose(scaled[:, 2], x[:, 2] - x[:, 2].mean())
        np.testing.assert_allclose(scaled[:, 1], (x[:, 1] - 10.0) / x[:, 1].std())
        # Hidden statistics are taken on the scaled inputs.
        z = scaled @ net.params["w0"] + net.params["b0"]
        np.testing.assert_allclose(net.stats["mean0"], z.mean(axis=0))

    def test_single_sample_is_ignored(self):
        net = PolicyNetwork(3, 2, NetConfig(hidden=(4,)))
        update_statistics(net, np.ones((1, 3)))
        np.testing.assert_array_equal(net.stats["mean0"], np.zeros(4))
        np.testing.assert_array_equal(net.stats["var0"], np.ones(4))


class TestCheckpoint(unittest.TestCase):
    def test_reload_reproduces_outputs(self):
        net, x, _ = _random_problem(4)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "policy.npz"
            save_checkpoint(net, path)
            loaded = load_checkpoint(path)
        self.assertEqual(loaded.config, net.config)
        np.testing.assert_array_equal(forward(loaded, x), forward(net, x))
        for key, value in net.stats.items():
            np.testing.assert_array_equal(loaded.stats[key], value)


class TestNetworkPolicy(unittest.TestCase):
    def test_batched_matches_single(self):
        state = make_state([(0, 0), (2, 3)], [(4, 4)])
        net = PolicyNetwork(feature_size(2, 1), ActionSpace(1).size, NetConfig(hidden=(8,), zero_output=False))
        policy = NetworkPolicy(net)
        batched = policy.distributions(state, [0, 1])
        np.testing.assert_allclose(batched[0], policy.distribution(state, 0))
        np.testing.assert_allclose(batched[1], forward(net, features(state, 1)))
        self.assertEqual(policy.distributions(state, []), [])


if __name__ == "__main__":
    unittest.main()
