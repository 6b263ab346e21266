from __future__ import annotations
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from pathlib import Path
import csv
import logging
import math

import numpy as np
import yaml

from engine import (
    Action,
    ActionSpace,
    GameState,
    Team,
    feature_size,
    features,
    hp_balance,
    step,
)
from game_theory import ResponseProfile, best_response_dynamics
from network import (
    NetConfig,
    NetworkPolicy,
    NonFiniteLoss,
    PolicyNetwork,
    apply_gradient,
    kl_loss,
    policy_gradient,
    save_checkpoint,
    update_statistics,
)
from policy import PolicyHandle
from scenario import Scenario, Stream
from value import Backing, RolloutValue

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    pass


def objective_distribution(responses: np.ndarray) -> np.ndarray:
    """Min-shifted, sum-normalized responses; uniform when all are equal.

    The worst action always gets exactly zero mass.
    """
    q = np.asarray(responses, dtype=np.float64)
    shifted = q - q.min()
    total = shifted.sum()
    if total <= 0.0:
        return np.full(len(q), 1.0 / len(q))
    return shifted / total


@dataclass
class ObjectivePolicy:
    actions: list[Action]
    probs: np.ndarray

    def full(self, space: ActionSpace) -> np.ndarray:
        """Spreads the legal-action distribution over the full action space."""
        target = np.zeros(space.size)
        for action, p in zip(self.actions, self.probs):
            target[space.index(action)] = p
        return target

    def argmax(self) -> Action:
        return self.actions[int(np.argmax(self.probs))]


def objective_policy(responses: ResponseProfile, agent: int) -> ObjectivePolicy:
    values = responses.responses[agent]
    actions = list(values)
    return ObjectivePolicy(actions, objective_distribution(np.array([values[a] for a in actions])))


def scale_invariance_check(responses: np.ndarray, c: float, shift: float = 0.0, tol: float = 1e-9) -> bool:
    """Whether the objective distribution survives responses -> c * responses + shift."""
    if c <= 0:
        raise ValueError(f"c must be positive, got {c}")
    base = objective_distribution(responses)
    mapped = objective_distribution(c * np.asarray(responses, dtype=np.float64) + shift)
    return bool(np.allclose(base, mapped, rtol=0.0, atol=tol))


class Stage(Enum):
    PNE = "pne"
    NETWORK = "network"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    total_steps: int = 5000
    early_stage_fraction: float = 0.5
    discount: float = 1.0
    iterations: int = 10
    # Rows per ascent step; 0 means one minibatch per episode.
    minibatch_size: int = 32
    seed: int = 0
    temperature: float = 1.0
    backing: str = Backing.COMBINED.value
    checkpoint_every: int = 50
    early_exit: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if not 0.0 <= self.early_stage_fraction <= 1.0:
            raise ConfigError(f"early_stage_fraction must be in [0, 1], got {self.early_stage_fraction}")
        if self.discount <= 0:
            raise ConfigError(f"discount must be positive, got {self.discount}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.minibatch_size < 0:
            raise ConfigError(f"minibatch_size must be >= 0, got {self.minibatch_size}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.backing not in {b.value for b in Backing}:
            raise ConfigError(f"Unknown backing '{self.backing}'")

    @property
    def stage_switch(self) -> int:
        """Global step at which exploration moves from the PNE to the network."""
        return math.floor(self.early_stage_fraction * self.total_steps)


def _accepts(kind: type, value) -> bool:
    # bool is an int subclass, so it is matched first and only by bool fields.
    if isinstance(value, bool) or kind is bool:
        return kind is bool and isinstance(value, bool)
    if kind is float:
        return isinstance(value, (int, float))
    return isinstance(value, kind)


def train_config_from_dict(data: dict) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    defaults = TrainConfig()
    values = {}
    for name, value in data.items():
        kind = type(getattr(defaults, name))
        if not _accepts(kind, value):
            raise ConfigError(f"Bad value for {name}: expected {kind.__name__}, got {value!r}")
        values[name] = kind(value)
    return TrainConfig(**values)


def load_train_config(path: str | Path) -> TrainConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Malformed config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must be a mapping")
    return train_config_from_dict(data)


@dataclass
class EpisodeLog:
    episode: int
    steps: int
    stage: str
    win: bool
    reward: int
    normalized_reward: float
    mean_loss: float


class TrainingLog:
    """Append-only CSV of episode rows."""

    columns = [f.name for f in fields(EpisodeLog)]

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, row: EpisodeLog):
        new = not self.path.exists() or self.path.stat().st_size == 0
        with open(self.path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.columns)
            if new:
                writer.writeheader()
            writer.writerow(asdict(row))


@dataclass
class TrainResult:
    net: PolicyNetwork
    log: list[EpisodeLog]
    steps: int
    # None when the budget ends before the network stage starts.
    stage_switch_step: int | None


def new_network(scenario: Scenario, net_config: NetConfig = NetConfig()) -> PolicyNetwork:
    space = ActionSpace(scenario.num_enemies)
    return PolicyNetwork(feature_size(scenario.num_allies, scenario.num_enemies), space.size, net_config)


class Trainer:
    """Self-improving loop: Q from rollouts, PNE by best-response dynamics,
    objective policies as KL targets, staged exploration."""

    def __init__(
        self,
        scenario: Scenario,
        demonstration: PolicyHandle,
        opponent: PolicyHandle,
        cfg: TrainConfig,
        net: PolicyNetwork,
        log_path: str | Path | None = None,
        checkpoint_path: str | Path | None = None,
    ):
        self.scenario = scenario
        self.demonstration = demonstration
        self.opponent = opponent
        self.cfg = cfg
        self.net = net
        self.learned = NetworkPolicy(net, name="learned")
        self.value = RolloutValue(
            demonstration, opponent, cfg.discount, self.learned, Backing(cfg.backing)
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.log = TrainingLog(log_path) if log_path else None
        self.checkpoint_path = checkpoint_path
        self.last_good = net.copy()

    def update(self, feats: list[np.ndarray], targets: list[np.ndarray]) -> float:
        """One ascent step on a minibatch; returns the mean per-agent loss.

        The step is the mean per-row gradient, so its size does not grow with
        the number of rows in the minibatch.
        """
        x, y = np.stack(feats), np.stack(targets)
        before = self.net.copy()
        update_statistics(self.net, x)
        try:
            loss = kl_loss(self.net, x, y)
            grads = policy_gradient(self.net, x, y)
        except NonFiniteLoss:
            if self.checkpoint_path:
                save_checkpoint(self.last_good, self.checkpoint_path)
                logger.error("training diverged; kept last good parameters in %s", self.checkpoint_path)
            raise
        self.last_good = before
        apply_gradient(self.net, grads, self.cfg.learning_rate / len(x))
        return loss / len(x)

    def decide(self, state: GameState, feats: list, targets: list) -> dict:
        """Solves the PNE at `state` and queues one KL target per agent."""
        # Parameters only change between decisions, so the cache is exact here.
        self.value.clear_cache()
        profile = best_response_dynamics(
            state, self.value, self.demonstration, self.cfg.iterations, self.cfg.early_exit
        )
        for agent in sorted(profile.responses):
            target = objective_policy(profile, agent).full(state.action_space(agent))
            feats.append(features(state, agent))
            targets.append(target)
        return profile.joint_action

    def run(self) -> TrainResult:
        cfg = self.cfg
        steps = 0
        episode = 0
        switch = None
        history = []
        while steps < cfg.total_steps:
            initial = state = self.scenario.spawn(cfg.seed, episode, Stream.TRAINING)
            feats, targets, losses = [], [], []
            stage = Stage.PNE
            while not state.terminal and steps < cfg.total_steps:
                stage = Stage.PNE if steps < cfg.stage_switch else Stage.NETWORK
                if stage is Stage.NETWORK and switch is None:
                    switch = steps
                    logger.info("exploration switches to the network at step %d", steps)
                pne = self.decide(state, feats, targets)
                if stage is Stage.PNE:
                    allied = pne
                else:
                    allied = self.learned.team_action(state, Team.ALLIED, self.rng, cfg.temperature)
                state = step(state, allied, self.opponent.team_action(state, Team.ENEMY))
                steps += 1
                if cfg.minibatch_size and len(feats) >= cfg.minibatch_size:
                    losses.append(self.update(feats, targets))
                    feats, targets = [], []
            if feats:
                losses.append(self.update(feats, targets))

            reward = hp_balance(state)
            allied_hp = sum(u.hp for u in initial.units if u.team is Team.ALLIED)
            row = EpisodeLog(
                episode=episode,
                steps=steps,
                stage=stage.value,
                win=state.terminal and reward > 0,
                reward=reward,
                normalized_reward=reward / allied_hp,
                mean_loss=float(np.mean(losses)) if losses else 0.0,
            )
            history.append(row)
            if self.log:
                self.log.append(row)
            logger.info(
                "episode %d: steps %d stage %s win %s reward %d loss %.4f",
                episode, steps, row.stage, row.win, reward, row.mean_loss,
            )
            episode += 1
            if self.checkpoint_path and episode % cfg.checkpoint_every == 0:
                save_checkpoint(self.net, self.checkpoint_path)

        if self.checkpoint_path:
            save_checkpoint(self.net, self.checkpoint_path)
        return TrainResult(self.net, history, steps, switch)


def train(
    scenario: Scenario,
    demonstration: PolicyHandle,
    opponent: PolicyHandle,
    cfg: TrainConfig,
    net_config: NetConfig = NetConfig(),
    net: PolicyNetwork | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainResult:
    if net is None:
        net = new_network(scenario, replace(net_config, seed=cfg.seed))
    trainer = Trainer(scenario, demonstration, opponent, cfg, net, log_path, checkpoint_path)
    return trainer.run()
