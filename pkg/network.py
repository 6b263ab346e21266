from __future__ import annotations
from dataclasses import asdict, dataclass
from pathlib import Path
import json

import numpy as np

from engine import GameState, features
from policy import PolicyHandle


class NetworkError(Exception):
    pass


class DimensionMismatch(NetworkError):
    pass


class NonFiniteLoss(NetworkError):
    pass


CHECKPOINT_VERSION = 1
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class NetConfig:
    hidden: tuple[int, ...] = (256, 128, 128)
    leaky_slope: float = 0.01
    # Running-statistics normalization after each hidden FC layer.
    normalization: bool = True
    momentum: float = 0.1
    eps: float = 1e-5
    # Inputs are centered and scaled by their running statistics; the variance
    # is floored at 1 so rare or constant features are never amplified.
    input_scaling: bool = True
    # A zero output layer makes the initial policy uniform.
    zero_output: bool = True
    seed: int = 0


class PolicyNetwork:
    """Fully connected policy network: FC, normalization, leaky ReLU per hidden
    layer, then an FC layer and a softmax over the full action space.

    Parameters live in `params`; normalization running statistics live in
    `stats` and are only changed by `update_statistics`.
    """

    def __init__(self, input_size: int, output_size: int, config: NetConfig = NetConfig()):
        self.input_size = input_size
        self.output_size = output_size
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.stats: dict[str, np.ndarray] = {}

        rng = np.random.default_rng(config.seed)
        widths = [input_size, *config.hidden, output_size]
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)
        last = len(config.hidden)
        if config.zero_output:
            self.params[f"w{last}"] = np.zeros_like(self.params[f"w{last}"])
        for i, width in enumerate(config.hidden):
            self.params[f"gamma{i}"] = np.ones(width)
            self.params[f"beta{i}"] = np.zeros(width)
            self.stats[f"mean{i}"] = np.zeros(width)
            self.stats[f"var{i}"] = np.ones(width)
        self.stats["input_mean"] = np.zeros(input_size)
        self.stats["input_var"] = np.ones(input_size)
        self.stats["batches"] = np.zeros(())

    @property
    def depth(self) -> int:
        return len(self.config.hidden)

    def copy(self) -> PolicyNetwork:
        clone = PolicyNetwork.__new__(PolicyNetwork)
        clone.input_size = self.input_size
        clone.output_size = self.output_size
        clone.config = self.config
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.stats = {k: v.copy() for k, v in self.stats.items()}
        return clone


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _scale_inputs(net: PolicyNetwork, x: np.ndarray) -> np.ndarray:
    if not net.config.input_scaling:
        return x
    return (x - net.stats["input_mean"]) / np.sqrt(np.maximum(net.stats["input_var"], 1.0))


def _run(net: PolicyNetwork, feats: np.ndarray) -> tuple[np.ndarray, list[dict]]:
    x = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if x.shape[1] != net.input_size:
        raise DimensionMismatch(f"Expected {net.input_size} features, got {x.shape[1]}")
    cfg = net.config
    layers = []
    h = _scale_inputs(net, x)
    for i in range(net.depth):
        z = h @ net.params[f"w{i}"] + net.params[f"b{i}"]
        layer = {"input": h, "z": z}
        if cfg.normalization:
            inv_std = 1.0 / np.sqrt(net.stats[f"var{i}"] + cfg.eps)
            xhat = (z - net.stats[f"mean{i}"]) * inv_std
            n = net.params[f"gamma{i}"] * xhat + net.params[f"beta{i}"]
            layer.update(xhat=xhat, inv_std=inv_std)
        else:
            n = z
        layer["n"] = n
        h = np.where(n > 0, n, cfg.leaky_slope * n)
        layers.append(layer)
    last = net.depth
    logits = h @ net.params[f"w{last}"] + net.params[f"b{last}"]
    layers.append({"input": h})
    return _softmax(logits), layers


def forward(net: PolicyNetwork, feats: np.ndarray) -> np.ndarray:
    """Action probabilities; a single feature vector yields a single row."""
    probs, _ = _run(net, feats)
    return probs[0] if np.ndim(feats) == 1 else probs


def _log_terms(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # Zero-target actions contribute nothing, so their log is never taken.
    safe = np.where(targets > 0, np.maximum(probs, LOG_FLOOR), 1.0)
    return np.where(targets > 0, targets * np.log(safe), 0.0)


def kl_loss(net: PolicyNetwork, feats: np.ndarray, targets: np.ndarray) -> float:
    """Cross-entropy part of KL(target || policy), summed over agents."""
    targets = np.atleast_2d(targets)
    probs, _ = _run(net, feats)
    if probs.shape != targets.shape:
        raise DimensionMismatch(f"Targets {targets.shape} do not match outputs {probs.shape}")
    loss = -float(_log_terms(probs, targets).sum())
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"Loss is {loss}")
    return loss


def policy_gradient(
    net: PolicyNetwork, feats: np.ndarray, targets: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradient of sum_g sum_a target(a) log p(a), the ascent direction."""
    targets = np.atleast_2d(targets)
    probs, layers = _run(net, feats)
    if probs.shape != targets.shape:
        raise DimensionMismatch(f"Targets {targets.shape} do not match outputs {probs.shape}")
    cfg = net.config
    grads = {}

    delta = targets - probs * targets.sum(axis=1, keepdims=True)
    last = net.depth
    grads[f"w{last}"] = layers[last]["input"].T @ delta
    grads[f"b{last}"] = delta.sum(axis=0)
    dh = delta @ net.params[f"w{last}"].T

    for i in reversed(range(net.depth)):
        layer = layers[i]
        dn = dh * np.where(layer["n"] > 0, 1.0, cfg.leaky_slope)
        if cfg.normalization:
            grads[f"gamma{i}"] = (dn * layer["xhat"]).sum(axis=0)
            grads[f"beta{i}"] = dn.sum(axis=0)
            dz = dn * net.params[f"gamma{i}"] * layer["inv_std"]
        else:
            grads[f"gamma{i}"] = np.zeros_like(net.params[f"gamma{i}"])
            grads[f"beta{i}"] = np.zeros_like(net.params[f"beta{i}"])
            dz = dn
        grads[f"w{i}"] = layer["input"].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ net.params[f"w{i}"].T

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"Gradient of {name} is not finite")
    return grads


def apply_gradient(net: PolicyNetwork, grads: dict[str, np.ndarray], learning_rate: float):
    for name, g in grads.items():
        net.params[name] += learning_rate * g


def update_statistics(net: PolicyNetwork, feats: np.ndarray):
    """Moves the normalization running statistics toward this batch.

    The first batches are averaged cumulatively until the momentum takes
    over. Batches of fewer than two samples carry no variance and are ignored.
    """
    cfg = net.config
    x = np.atleast_2d(feats)
    if not (cfg.normalization or cfg.input_scaling) or x.shape[0] < 2:
        return
    m = max(cfg.momentum, 1.0 / (float(net.stats["batches"]) + 1.0))
    if cfg.input_scaling:
        net.stats["input_mean"] = (1 - m) * net.stats["input_mean"] + m * x.mean(axis=0)
        net.stats["input_var"] = (1 - m) * net.stats["input_var"] + m * x.var(axis=0)
    # Hidden statistics see the inputs as scaled by the statistics just updated.
    _, layers = _run(net, x)
    for i in range(net.depth if cfg.normalization else 0):
        z = layers[i]["z"]
        net.stats[f"mean{i}"] = (1 - m) * net.stats[f"mean{i}"] + m * z.mean(axis=0)
        net.stats[f"var{i}"] = (1 - m) * net.stats[f"var{i}"] + m * z.var(axis=0)
    net.stats["batches"] = net.stats["batches"] + 1.0


def save_checkpoint(net: PolicyNetwork, path: str | Path):
    arrays = {f"param_{k}": v for k, v in net.params.items()}
    arrays.update({f"stat_{k}": v for k, v in net.stats.items()})
    header = {
        "version": CHECKPOINT_VERSION,
        "input_size": net.input_size,
        "output_size": net.output_size,
        "config": asdict(net.config),
    }
    with open(path, "wb") as f:
        np.savez(f, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> PolicyNetwork:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(data["header"].item())
        if header["version"] != CHECKPOINT_VERSION:
            raise NetworkError(f"Unsupported checkpoint version {header['version']}")
        cfg = header["config"]
        cfg["hidden"] = tuple(cfg["hidden"])
        net = PolicyNetwork(header["input_size"], header["output_size"], NetConfig(**cfg))
        for key in data.files:
            if key.startswith("param_"):
                net.params[key[len("param_"):]] = data[key].copy()
            elif key.startswith("stat_"):
                net.stats[key[len("stat_"):]] = data[key].copy()
    return net


class NetworkPolicy(PolicyHandle):
    """The decentralized policy: one shared network over agent-centric features."""

    def __init__(self, net: PolicyNetwork, name: str = "network"):
        self.net = net
        self.name = name

    def distribution(self, state: GameState, agent_id: int) -> np.ndarray:
        return forward(self.net, features(state, agent_id))

    def distributions(self, state: GameState, agents: list[int]) -> list[np.ndarray]:
        if not agents:
            return []
        probs = forward(self.net, np.stack([features(state, a) for a in agents]))
        return list(probs)
