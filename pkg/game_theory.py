from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, Hashable
import itertools
import logging
import math

import numpy as np

from engine import Action, GameState, JointAction, Team, legal_actions, occupied_cells
from policy import PolicyHandle

logger = logging.getLogger(__name__)


class GameTheoryError(Exception):
    pass


class TerminalState(GameTheoryError):
    pass


class IncompleteTensor(GameTheoryError):
    pass


# Centralized state-action value: (state, allied joint action) -> shared payoff.
QFunction = Callable[[GameState, JointAction], float]


@dataclass
class ResponseProfile:
    joint_action: dict
    # Per agent: action -> payoff of deviating to it against the others'
    # actions at the time of that agent's last update.
    responses: dict[Hashable, dict]
    # True when the last sweep changed nothing, so joint_action is a PNE.
    converged: bool
    sweeps: int
    evaluations: int


def best_response(
    action_sets: dict[Hashable, list],
    payoff: Callable[[dict], float],
    initial: dict,
    iterations: int,
    early_exit: bool = False,
    trace: list | None = None,
) -> ResponseProfile:
    """Best-response dynamics on a common-payoff game.

    Agents update in ascending order; each takes the argmax of its responses,
    keeping its current action when that is tied for the maximum and
    otherwise taking the first maximizer in `action_sets` order. When `trace`
    is given, (joint action, payoff) is appended after every single update.
    """
    if iterations < 1:
        raise GameTheoryError(f"iterations must be >= 1, got {iterations}")
    current = dict(initial)
    responses = {}
    evaluations = 0
    converged = False
    sweeps = 0
    for _ in range(iterations):
        sweeps += 1
        changed = False
        for agent in sorted(action_sets):
            values = {}
            for action in action_sets[agent]:
                values[action] = payoff({**current, agent: action})
                evaluations += 1
            top = max(values.values())
            best = current.get(agent)
            if values.get(best) != top:
                best = next(a for a in action_sets[agent] if values[a] == top)
            if best != current.get(agent):
                current[agent] = best
                changed = True
            responses[agent] = values
            if trace is not None:
                trace.append((dict(current), values[best]))
        converged = not changed
        if converged and early_exit:
            break
    return ResponseProfile(current, responses, converged, sweeps, evaluations)


def _decision_problem(
    state: GameState, init: PolicyHandle
) -> tuple[dict[int, list[Action]], JointAction]:
    if state.terminal:
        raise TerminalState(f"State at step {state.step} is terminal")
    occupied = occupied_cells(state)
    agents = state.living(Team.ALLIED)
    action_sets = {g: legal_actions(state, g, occupied) for g in agents}
    return action_sets, init.joint_action(state, agents)


def best_response_dynamics(
    state: GameState,
    q: QFunction,
    init: PolicyHandle,
    iterations: int = 10,
    early_exit: bool = False,
) -> ResponseProfile:
    """Searches a PNE of Q(state, .) over the living allied agents' legal
    actions, starting from the init policy's argmax actions.

    With early_exit the search stops after the first sweep that changes
    nothing; the result is the same as running all sweeps.
    """
    action_sets, initial = _decision_problem(state, init)
    profile = best_response(
        action_sets, lambda joint: q(state, joint), initial, iterations, early_exit
    )
    logger.debug(
        "best response at step %d: %d sweeps, %d evaluations, fixed point %s",
        state.step, profile.sweeps, profile.evaluations, profile.converged,
    )
    return profile


def sweep_trace(
    state: GameState, q: QFunction, init: PolicyHandle, iterations: int = 10
) -> list[tuple[JointAction, float]]:
    action_sets, initial = _decision_problem(state, init)
    trace: list = []
    best_response(action_sets, lambda joint: q(state, joint), initial, iterations, trace=trace)
    return trace


@dataclass
class PayoffTensor:
    """Explicit common-payoff table for small games (oracle fixtures)."""

    actions: tuple[int, ...]
    payoffs: dict[tuple[int, ...], float]

    @property
    def num_agents(self) -> int:
        return len(self.actions)

    def joint_actions(self):
        return itertools.product(*(range(n) for n in self.actions))

    def action_sets(self) -> dict[int, list[int]]:
        return {g: list(range(n)) for g, n in enumerate(self.actions)}

    def payoff(self, joint: dict[int, int]) -> float:
        return self.payoffs[tuple(joint[g] for g in range(self.num_agents))]

    @staticmethod
    def random(rng: np.random.Generator, actions: tuple[int, ...]) -> PayoffTensor:
        payoffs = {}
        for joint in itertools.product(*(range(n) for n in actions)):
            payoffs[joint] = float(rng.uniform(-1.0, 1.0))
        return PayoffTensor(tuple(actions), payoffs)

    # Text format: a header line "<agents> <actions of agent 0> ...", then
    # one line per joint action: "<index> ... <payoff>". '#' starts a comment.
    def to_text(self) -> str:
        lines = [" ".join(str(n) for n in (self.num_agents, *self.actions))]
        for joint in self.joint_actions():
            if joint in self.payoffs:
                lines.append(" ".join(str(i) for i in joint) + f" {self.payoffs[joint]!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> PayoffTensor:
        rows = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(line.split())
        if not rows:
            raise IncompleteTensor("Empty payoff tensor")
        try:
            header = [int(v) for v in rows[0]]
            if len(header) != header[0] + 1:
                raise IncompleteTensor(f"Header declares {header[0]} agents but lists {len(header) - 1}")
            actions = tuple(header[1:])
            payoffs = {}
            for row in rows[1:]:
                if len(row) != len(actions) + 1:
                    raise IncompleteTensor(f"Malformed payoff line: {' '.join(row)}")
                payoffs[tuple(int(v) for v in row[:-1])] = float(row[-1])
        except ValueError as e:
            raise IncompleteTensor(f"Malformed payoff tensor: {e}") from e
        return PayoffTensor(actions, payoffs)


def brute_force_pne(tensor: PayoffTensor) -> set[tuple[int, ...]]:
    """Every joint action that no unilateral deviation improves."""
    for joint in tensor.joint_actions():
        value = tensor.payoffs.get(joint)
        if value is None or not math.isfinite(value):
            raise IncompleteTensor(f"Missing or non-finite payoff for {joint}")
    equilibria = set()
    for joint in tensor.joint_actions():
        value = tensor.payoffs[joint]
        stable = True
        for g, n in enumerate(tensor.actions):
            for a in range(n):
                deviation = joint[:g] + (a,) + joint[g + 1 :]
                if tensor.payoffs[deviation] > value:
                    stable = False
                    break
            if not stable:
                break
        if stable:
            equilibria.add(joint)
    return equilibria


def tensor_best_response(
    tensor: PayoffTensor, initial: tuple[int, ...], iterations: int = 10, early_exit: bool = False
) -> ResponseProfile:
    return best_response(
        tensor.action_sets(),
        tensor.payoff,
        dict(enumerate(initial)),
        iterations,
        early_exit,
    )
