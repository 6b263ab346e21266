from __future__ import annotations
from dataclasses import asdict, dataclass, field
from enum import Enum
import itertools
import logging

import numpy as np

from engine import (
    GameState,
    JointAction,
    Team,
    legal_actions,
    occupied_cells,
    resolve_step,
    state_hash,
    terminal_reward,
)
from game_theory import TerminalState, best_response_dynamics
from policy import PolicyHandle
from scenario import Scenario

logger = logging.getLogger(__name__)


class Backing(Enum):
    COMBINED = "full"
    DEMO = "q_demo_only"
    THETA = "q_theta_only"


def _advance(state: GameState, allied: JointAction, opponent: PolicyHandle, validate: bool) -> GameState:
    return resolve_step(state, allied, opponent.team_action(state, Team.ENEMY), validate)[0]


def play_out(
    state: GameState,
    policy: PolicyHandle,
    opponent: PolicyHandle,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> GameState:
    """Rolls the state forward to termination; argmax actions unless rng is given."""
    while not state.terminal:
        allied = policy.team_action(state, Team.ALLIED, rng, temperature)
        state = _advance(state, allied, opponent, validate=False)
    return state


def discounted(final: GameState, origin_step: int, discount: float) -> float:
    return discount ** (final.step - 1 - origin_step) * terminal_reward(final)


def rollout_return(
    state: GameState,
    first: JointAction,
    policy: PolicyHandle,
    opponent: PolicyHandle,
    discount: float = 1.0,
    deterministic_actions: bool = True,
    rng: np.random.Generator | None = None,
) -> float:
    """Discounted terminal reward of playing `first`, then `policy` against
    `opponent` until the episode ends."""
    if state.terminal:
        raise TerminalState(f"State at step {state.step} is terminal")
    nxt = _advance(state, first, opponent, validate=True)
    if not deterministic_actions and rng is None:
        rng = np.random.default_rng(0)
    final = play_out(nxt, policy, opponent, None if deterministic_actions else rng)
    return discounted(final, state.step, discount)


def _key(kind: str, state: GameState, action: JointAction) -> tuple:
    return (kind, state, tuple(sorted(action.items())))


class RolloutValue:
    """Centralized Q estimated by deterministic rollouts.

    q_demo continues with the demonstration policy, q_theta with the learned
    policy's argmax, q_combined takes their max. Calling the instance uses
    the configured backing. Results are memoized until clear_cache(), which
    the caller must invoke whenever the learned parameters change.
    """

    def __init__(
        self,
        demonstration: PolicyHandle,
        opponent: PolicyHandle,
        discount: float = 1.0,
        learned: PolicyHandle | None = None,
        backing: Backing = Backing.COMBINED,
    ):
        if discount <= 0:
            raise ValueError(f"discount must be positive, got {discount}")
        if backing is not Backing.DEMO and learned is None:
            raise ValueError(f"backing {backing.value} needs a learned policy")
        self.demonstration = demonstration
        self.opponent = opponent
        self.discount = discount
        self.learned = learned
        self.backing = backing
        self.cache: dict[tuple, float] = {}
        self.rollouts = 0

    def clear_cache(self):
        self.cache.clear()

    def _rollout(self, kind: str, state: GameState, action: JointAction, policy: PolicyHandle) -> float:
        key = _key(kind, state, action)
        value = self.cache.get(key)
        if value is None:
            value = rollout_return(state, action, policy, self.opponent, self.discount)
            self.cache[key] = value
            self.rollouts += 1
        return value

    def q_demo(self, state: GameState, action: JointAction) -> float:
        return self._rollout("demo", state, action, self.demonstration)

    def q_theta(self, state: GameState, action: JointAction, learned: PolicyHandle | None = None) -> float:
        if learned is not None and learned is not self.learned:
            return rollout_return(state, action, learned, self.opponent, self.discount)
        if self.learned is None:
            raise ValueError("q_theta needs a learned policy")
        return self._rollout("theta", state, action, self.learned)

    def q_combined(self, state: GameState, action: JointAction) -> float:
        return max(self.q_theta(state, action), self.q_demo(state, action))

    def __call__(self, state: GameState, action: JointAction) -> float:
        if self.backing is Backing.DEMO:
            return self.q_demo(state, action)
        if self.backing is Backing.THETA:
            return self.q_theta(state, action)
        return self.q_combined(state, action)


def joint_actions(state: GameState) -> list[JointAction]:
    """All legal allied joint actions of a state."""
    occupied = occupied_cells(state)
    agents = state.living(Team.ALLIED)
    options = [legal_actions(state, g, occupied) for g in agents]
    return [dict(zip(agents, combo)) for combo in itertools.product(*options)]


def optimal_value(
    state: GameState,
    opponent: PolicyHandle,
    continuation: PolicyHandle,
    discount: float = 1.0,
    depth: int = 2,
) -> float:
    """Best return over every allied action sequence of the next `depth`
    decisions, followed by `continuation`. Exhaustive; tiny fixtures only."""
    if state.terminal:
        raise TerminalState(f"State at step {state.step} is terminal")
    origin = state.step

    def search(s: GameState, remaining: int) -> float:
        best = float("-inf")
        for joint in joint_actions(s):
            nxt = _advance(s, joint, opponent, validate=False)
            if nxt.terminal:
                v = discounted(nxt, origin, discount)
            elif remaining == 1:
                v = discounted(play_out(nxt, continuation, opponent), origin, discount)
            else:
                v = search(nxt, remaining - 1)
            best = max(best, v)
        return best

    return search(state, depth)


def pne_return(
    state: GameState,
    first: JointAction,
    value: RolloutValue,
    iterations: int = 10,
) -> tuple[float, bool]:
    """Return of playing `first` and then, at every later step, the PNE that
    best-response dynamics finds on the demonstration Q. Also reports
    whether every one of those searches reached a fixed point."""
    if state.terminal:
        raise TerminalState(f"State at step {state.step} is terminal")
    s = _advance(state, first, value.opponent, validate=True)
    converged = True
    while not s.terminal:
        profile = best_response_dynamics(s, value.q_demo, value.demonstration, iterations, early_exit=True)
        converged &= profile.converged
        s = _advance(s, profile.joint_action, value.opponent, validate=False)
    return discounted(s, state.step, value.discount), converged


@dataclass
class Lemma1Sample:
    state_hash: str
    step: int
    q_demo: float
    q_pne: float
    violation: bool
    fixed_points: bool


@dataclass
class Lemma1Report:
    samples: list[Lemma1Sample] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(s.violation for s in self.samples)

    @property
    def max_violation(self) -> float:
        return max((s.q_demo - s.q_pne for s in self.samples if s.violation), default=0.0)

    def to_dict(self) -> dict:
        return {
            "samples": [asdict(s) for s in self.samples],
            "count": len(self.samples),
            "violations": self.violations,
            "max_violation": self.max_violation,
        }


def check_lemma1(
    scenario: Scenario,
    demonstration: PolicyHandle,
    opponent: PolicyHandle,
    samples: int,
    seed: int,
    discount: float = 1.0,
    iterations: int = 10,
) -> Lemma1Report:
    """Compares the demonstration Q with the Q of re-solving the PNE at every
    later step, on seeded reachable (state, joint action) pairs."""
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    rng = np.random.default_rng(seed)
    value = RolloutValue(demonstration, opponent, discount, backing=Backing.DEMO)
    report = Lemma1Report()
    for k in range(samples):
        # A state reached by the demonstration, then a random legal joint action.
        trajectory = [scenario.spawn(seed, k)]
        while not trajectory[-1].terminal:
            allied = demonstration.team_action(trajectory[-1], Team.ALLIED)
            trajectory.append(_advance(trajectory[-1], allied, opponent, validate=False))
        state = trajectory[int(rng.integers(0, len(trajectory) - 1))]
        occupied = occupied_cells(state)
        action = {}
        for g in state.living(Team.ALLIED):
            legal = legal_actions(state, g, occupied)
            action[g] = legal[int(rng.integers(0, len(legal)))]

        value.clear_cache()
        q_demo = value.q_demo(state, action)
        q_pne, fixed_points = pne_return(state, action, value, iterations)
        sample = Lemma1Sample(state_hash(state), state.step, q_demo, q_pne, q_pne < q_demo, fixed_points)
        report.samples.append(sample)
        logger.info(
            "lemma sample %d: step %d q_demo %.3f q_pne %.3f%s",
            k, state.step, q_demo, q_pne, " VIOLATION" if sample.violation else "",
        )
    return report
