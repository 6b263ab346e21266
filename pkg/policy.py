from __future__ import annotations
from abc import ABC, abstractmethod
from typing import Callable

import numpy as np

from engine import Action, GameState, JointAction, Team, legal_actions, occupied_cells


class PolicyHandle(ABC):
    """Uniform interface over heuristics, imitation fits and the learned network.

    A policy maps (state, agent) to a distribution over the agent's full
    action space. Consumers mask the distribution to legal actions.
    """

    name: str = "policy"

    @abstractmethod
    def distribution(self, state: GameState, agent_id: int) -> np.ndarray: ...

    def distributions(self, state: GameState, agents: list[int]) -> list[np.ndarray]:
        return [self.distribution(state, agent_id) for agent_id in agents]

    def greedy(self, state: GameState, agent_id: int) -> Action:
        return self.joint_action(state, [agent_id])[agent_id]

    def joint_action(
        self,
        state: GameState,
        agents: list[int],
        rng: np.random.Generator | None = None,
        temperature: float = 1.0,
    ) -> JointAction:
        """Legal actions for `agents`: argmax when rng is None, else sampled."""
        occupied = occupied_cells(state)
        joint = {}
        for agent_id, probs in zip(agents, self.distributions(state, agents)):
            space = state.action_space(agent_id)
            legal = [space.index(a) for a in legal_actions(state, agent_id, occupied)]
            if rng is None:
                index = masked_argmax(probs, legal)
            else:
                index = masked_sample(probs, legal, rng, temperature)
            joint[agent_id] = space.action(index)
        return joint

    def team_action(
        self,
        state: GameState,
        team: Team,
        rng: np.random.Generator | None = None,
        temperature: float = 1.0,
    ) -> JointAction:
        return self.joint_action(state, state.living(team), rng, temperature)


def masked_argmax(probs: np.ndarray, legal: list[int]) -> int:
    # Ties go to the lowest index; legal is ascending.
    best = legal[0]
    for i in legal[1:]:
        if probs[i] > probs[best]:
            best = i
    return best


def masked_distribution(probs: np.ndarray, legal: list[int], temperature: float = 1.0) -> np.ndarray:
    masked = np.zeros_like(probs)
    weights = probs[legal]
    if temperature != 1.0:
        weights = np.power(weights, 1.0 / temperature)
    total = weights.sum()
    if total > 0.0:
        masked[legal] = weights / total
    else:
        masked[legal] = 1.0 / len(legal)
    return masked


def masked_sample(
    probs: np.ndarray, legal: list[int], rng: np.random.Generator, temperature: float = 1.0
) -> int:
    masked = masked_distribution(probs, legal, temperature)
    return int(rng.choice(len(masked), p=masked))


class HeuristicPolicy(PolicyHandle):
    """Wraps a deterministic rule as a one-hot policy."""

    def __init__(self, name: str, rule: Callable[[GameState, int], Action]):
        self.name = name
        self.rule = rule

    def distribution(self, state: GameState, agent_id: int) -> np.ndarray:
        space = state.action_space(agent_id)
        probs = np.zeros(space.size)
        probs[space.index(self.rule(state, agent_id))] = 1.0
        return probs

    def joint_action(self, state, agents, rng=None, temperature=1.0) -> JointAction:
        # Sampling a one-hot distribution always returns its support.
        return {agent_id: self.rule(state, agent_id) for agent_id in agents}
