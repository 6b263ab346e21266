from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Callable
import json
import logging

import numpy as np

from engine import (
    HOLD,
    Action,
    DeadAgent,
    Direction,
    GameState,
    JointAction,
    Team,
    chebyshev,
    destination,
    dist2,
    enemy_order,
    feature_size,
    features,
    in_map,
    occupied_cells,
    state_from_dict,
    state_hash,
    state_to_dict,
    step,
)
from network import (
    NetConfig,
    NetworkPolicy,
    PolicyNetwork,
    apply_gradient,
    kl_loss,
    policy_gradient,
    update_statistics,
)
from policy import HeuristicPolicy, PolicyHandle
from scenario import Scenario, Stream

logger = logging.getLogger(__name__)


class DemonstrationError(Exception):
    pass


class EmptyRequest(DemonstrationError):
    pass


def _living_enemies(state: GameState, agent_id: int) -> list[int]:
    return state.living(state.units[agent_id].team.opponent())


def approach_closest(state: GameState, agent_id: int) -> Action:
    """Moves toward the closest living enemy, or holds if no legal move
    strictly shrinks the distance. Direction order breaks ties."""
    me = state.units[agent_id]
    enemies = _living_enemies(state, agent_id)
    if not enemies:
        return HOLD
    target = min(enemies, key=lambda i: (dist2(me.pos, state.units[i].pos), state.units[i].hp, i))
    goal = state.units[target].pos
    occupied = occupied_cells(state)
    best, best_dist = HOLD, dist2(me.pos, goal)
    for direction in Direction:
        dest = destination(me, direction)
        if not in_map(state, dest) or dest in occupied:
            continue
        d = dist2(dest, goal)
        if d < best_dist:
            best, best_dist = Action.move(direction), d
    return best


def _attack_or_approach(
    state: GameState, agent_id: int, rank: Callable[[int, int, int], tuple]
) -> Action:
    me = state.units[agent_id]
    if not me.alive:
        raise DeadAgent(f"Agent {agent_id} is dead")
    if me.cooldown == 0:
        candidates = []
        for slot, i in enumerate(enemy_order(state, agent_id)):
            enemy = state.units[i]
            if enemy.alive and chebyshev(me.pos, enemy.pos) <= me.spec.weapon_range:
                candidates.append((rank(dist2(me.pos, enemy.pos), enemy.hp, i), slot))
        if candidates:
            return Action.attack(min(candidates)[1])
    return approach_closest(state, agent_id)


def attack_closest(state: GameState, agent_id: int) -> Action:
    # Closest in-range enemy; ties by lower hp, then lower id.
    return _attack_or_approach(state, agent_id, lambda d, hp, i: (d, hp, i))


def attack_weakest(state: GameState, agent_id: int) -> Action:
    # Weakest in-range enemy; ties by distance, then lower id.
    return _attack_or_approach(state, agent_id, lambda d, hp, i: (hp, d, i))


ATTACK_CLOSEST = HeuristicPolicy("closest", attack_closest)
ATTACK_WEAKEST = HeuristicPolicy("weakest", attack_weakest)
HEURISTICS = {p.name: p for p in (ATTACK_CLOSEST, ATTACK_WEAKEST)}


def heuristic(name: str) -> HeuristicPolicy:
    if name not in HEURISTICS:
        raise DemonstrationError(f"Unknown heuristic '{name}', expected one of {sorted(HEURISTICS)}")
    return HEURISTICS[name]


@dataclass(frozen=True)
class DemoRecord:
    episode: int
    state: GameState
    actions: JointAction


@dataclass
class Demonstration:
    records: list[DemoRecord]

    def __post_init__(self):
        if not self.records:
            raise EmptyRequest("A demonstration needs at least one record")

    def __len__(self) -> int:
        return len(self.records)


def record_demonstration(
    scenario: Scenario,
    demonstrator: PolicyHandle,
    opponent: PolicyHandle,
    episodes: int,
    seed: int,
) -> Demonstration:
    """Plays seeded episodes and logs every state with the allied actions."""
    if episodes < 1:
        raise EmptyRequest(f"Cannot record {episodes} episodes")
    records = []
    for episode in range(episodes):
        state = scenario.spawn(seed, episode, Stream.DEMONSTRATION)
        while not state.terminal:
            allied = demonstrator.team_action(state, Team.ALLIED)
            enemy = opponent.team_action(state, Team.ENEMY)
            records.append(DemoRecord(episode, state, allied))
            state = step(state, allied, enemy)
    logger.info(
        "recorded %d records over %d episodes of %s (%s vs %s)",
        len(records), episodes, scenario.name, demonstrator.name, opponent.name,
    )
    return Demonstration(records)


def save_demonstration(demo: Demonstration, path: str | Path):
    with open(path, "w") as f:
        for r in demo.records:
            line = {
                "episode": r.episode,
                "step": r.state.step,
                "hash": state_hash(r.state),
                "state": state_to_dict(r.state),
                "actions": {str(a): act.code() for a, act in sorted(r.actions.items())},
            }
            f.write(json.dumps(line, sort_keys=True) + "\n")


def load_demonstration(path: str | Path) -> Demonstration:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            data = json.loads(line)
            state = state_from_dict(data["state"])
            if state_hash(state) != data["hash"]:
                raise DemonstrationError(f"{path}:{lineno}: state hash mismatch")
            actions = {int(a): Action.from_code(c) for a, c in data["actions"].items()}
            records.append(DemoRecord(data["episode"], state, actions))
    return Demonstration(records)


@dataclass(frozen=True)
class ImitationConfig:
    epochs: int = 200
    learning_rate: float = 0.05
    minibatch_size: int = 64
    seed: int = 0


@dataclass
class ImitationResult:
    policy: NetworkPolicy
    initial_loss: float
    final_loss: float


def demonstration_samples(demo: Demonstration) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows and one-hot action targets, one per (record, agent)."""
    feats, targets = [], []
    for r in demo.records:
        for agent_id, action in sorted(r.actions.items()):
            space = r.state.action_space(agent_id)
            target = np.zeros(space.size)
            target[space.index(action)] = 1.0
            feats.append(features(r.state, agent_id))
            targets.append(target)
    return np.stack(feats), np.stack(targets)


def fit_imitation(
    demo: Demonstration,
    net_config: NetConfig = NetConfig(),
    config: ImitationConfig = ImitationConfig(),
) -> ImitationResult:
    """Fits the policy network to the demonstration by minimizing the mean
    cross-entropy of the recorded actions."""
    first = demo.records[0].state
    team = Team.ALLIED
    net = PolicyNetwork(
        feature_size(first.team_size(team), first.team_size(team.opponent())),
        first.action_space(first.team_indices(team)[0]).size,
        net_config,
    )
    x, y = demonstration_samples(demo)
    n = len(x)
    initial = kl_loss(net, x, y) / n
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            batch = order[start : start + config.minibatch_size]
            update_statistics(net, x[batch])
            grads = policy_gradient(net, x[batch], y[batch])
            apply_gradient(net, grads, config.learning_rate / len(batch))
        logger.debug("imitation epoch %d loss %.4f", epoch, kl_loss(net, x, y) / n)
    final = kl_loss(net, x, y) / n
    logger.info("imitation fit on %d samples: loss %.4f -> %.4f", n, initial, final)
    return ImitationResult(NetworkPolicy(net, name="imitation"), initial, final)


def imitation_agreement(
    policy: PolicyHandle,
    demonstrator: HeuristicPolicy,
    scenario: Scenario,
    opponent: PolicyHandle,
    episodes: int,
    seed: int,
) -> float:
    """Fraction of held-out allied decisions where the policy's legal argmax
    matches the demonstrator's action."""
    held_out = record_demonstration(scenario, demonstrator, opponent, episodes, seed)
    matches = total = 0
    for r in held_out.records:
        chosen = policy.team_action(r.state, Team.ALLIED)
        for agent_id, action in r.actions.items():
            matches += chosen[agent_id] == action
            total += 1
    return matches / total
