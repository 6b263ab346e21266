from __future__ import annotations
from collections import defaultdict
from dataclasses import dataclass, replace
from enum import Enum, auto
import hashlib

import numpy as np


class EngineError(Exception):
    pass


class IllegalAction(EngineError):
    pass


class AlreadyTerminal(EngineError):
    pass


class NotTerminal(EngineError):
    pass


class DeadAgent(EngineError):
    pass


class Team(Enum):
    ALLIED = auto()
    ENEMY = auto()

    def opponent(self) -> Team:
        return Team.ENEMY if self is Team.ALLIED else Team.ALLIED


# Direction order doubles as the tie-break order for movement and as the
# first four entries of the action space.
class Direction(Enum):
    LEFT = 0
    RIGHT = 1
    UP = 2
    DOWN = 3


_deltas = {
    Direction.LEFT: (-1, 0),
    Direction.RIGHT: (1, 0),
    Direction.UP: (0, 1),
    Direction.DOWN: (0, -1),
}


class ActionKind(Enum):
    MOVE = auto()
    ATTACK = auto()
    HOLD = auto()


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    direction: Direction | None = None
    target_slot: int | None = None

    @staticmethod
    def move(direction: Direction) -> Action:
        return Action(ActionKind.MOVE, direction=direction)

    @staticmethod
    def attack(slot: int) -> Action:
        return Action(ActionKind.ATTACK, target_slot=slot)

    def code(self) -> str:
        """Compact text code, independent of roster sizes: 'm:left', 'a:2', 'h'."""
        if self.kind is ActionKind.MOVE:
            return f"m:{self.direction.name.lower()}"
        if self.kind is ActionKind.ATTACK:
            return f"a:{self.target_slot}"
        return "h"

    @staticmethod
    def from_code(code: str) -> Action:
        if code == "h":
            return HOLD
        kind, _, arg = code.partition(":")
        if kind == "m":
            return Action.move(Direction[arg.upper()])
        if kind == "a":
            return Action.attack(int(arg))
        raise IllegalAction(f"Unknown action code '{code}'")


HOLD = Action(ActionKind.HOLD)

# Joint actions map positional agent ids to actions.
JointAction = dict[int, Action]


class ActionSpace:
    """Indexes an agent's full action space: directions, attack slots, hold."""

    def __init__(self, num_enemies: int):
        self.num_enemies = num_enemies
        self.size = len(Direction) + num_enemies + 1

    def index(self, action: Action) -> int:
        if action.kind is ActionKind.MOVE:
            return action.direction.value
        if action.kind is ActionKind.ATTACK:
            return len(Direction) + action.target_slot
        return self.size - 1

    def action(self, index: int) -> Action:
        if index < len(Direction):
            return Action.move(Direction(index))
        if index < self.size - 1:
            return Action.attack(index - len(Direction))
        return HOLD


@dataclass(frozen=True)
class UnitSpec:
    max_hp: int
    damage: int
    weapon_range: int
    velocity: int
    max_cooldown: int

    def __post_init__(self):
        for name in ("max_hp", "damage", "weapon_range", "velocity"):
            if getattr(self, name) < 1:
                raise EngineError(f"UnitSpec.{name} must be >= 1")
        if self.max_cooldown < 0:
            raise EngineError("UnitSpec.max_cooldown must be >= 0")

    @property
    def damage_per_frame(self) -> float:
        return self.damage / (self.max_cooldown + 1)


@dataclass(frozen=True)
class UnitState:
    spec: UnitSpec
    hp: int
    pos: tuple[int, int]
    cooldown: int
    team: Team
    unit_id: int

    def __post_init__(self):
        if not 0 <= self.hp <= self.spec.max_hp:
            raise EngineError(f"hp {self.hp} outside [0, {self.spec.max_hp}]")
        if not 0 <= self.cooldown <= self.spec.max_cooldown:
            raise EngineError(f"cooldown {self.cooldown} outside [0, {self.spec.max_cooldown}]")

    @property
    def alive(self) -> bool:
        return self.hp > 0


@dataclass(frozen=True)
class GameState:
    # Allies first, then enemies. Dead units stay in place with hp 0.
    units: tuple[UnitState, ...]
    map_extent: tuple[int, int]
    step: int
    max_steps: int

    def team_indices(self, team: Team) -> list[int]:
        return [i for i, u in enumerate(self.units) if u.team is team]

    def living(self, team: Team) -> list[int]:
        return [i for i, u in enumerate(self.units) if u.team is team and u.alive]

    def team_size(self, team: Team) -> int:
        return sum(1 for u in self.units if u.team is team)

    @property
    def terminal(self) -> bool:
        if self.step >= self.max_steps:
            return True
        allied = any(u.alive for u in self.units if u.team is Team.ALLIED)
        enemy = any(u.alive for u in self.units if u.team is Team.ENEMY)
        return not (allied and enemy)

    def action_space(self, agent_id: int) -> ActionSpace:
        return ActionSpace(self.team_size(self.units[agent_id].team.opponent()))


@dataclass(frozen=True)
class AttackEvent:
    attacker: int
    target: int
    damage: int
    # The target's snapshot hp was already covered by lower-id attackers.
    invalid: bool


def chebyshev(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def dist2(a: tuple[int, int], b: tuple[int, int]) -> int:
    return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2


def hp_balance(state: GameState) -> int:
    allied = sum(u.hp for u in state.units if u.team is Team.ALLIED)
    enemy = sum(u.hp for u in state.units if u.team is Team.ENEMY)
    return allied - enemy


def terminal_reward(state: GameState) -> int:
    if not state.terminal:
        raise NotTerminal(f"State at step {state.step} is not terminal")
    return hp_balance(state)


def normalized_reward(state: GameState, initial: GameState) -> float:
    reward = terminal_reward(state)
    return reward / sum(u.hp for u in initial.units if u.team is Team.ALLIED)


def _check_alive(state: GameState, agent_id: int) -> UnitState:
    unit = state.units[agent_id]
    if not unit.alive:
        raise DeadAgent(f"Agent {agent_id} is dead")
    return unit


def enemy_order(state: GameState, agent_id: int) -> list[int]:
    """The agent's ordered enemy list; attack slots index into it.

    Living in-range enemies come first, then living out-of-range enemies, each
    ascending by (hp, squared distance, index); dead enemies close the list.
    """
    me = state.units[agent_id]
    in_range, out_of_range, dead = [], [], []
    for i, u in enumerate(state.units):
        if u.team is me.team:
            continue
        if not u.alive:
            dead.append(i)
            continue
        key = (u.hp, dist2(me.pos, u.pos), i)
        if chebyshev(me.pos, u.pos) <= me.spec.weapon_range:
            in_range.append(key)
        else:
            out_of_range.append(key)
    return [k[2] for k in sorted(in_range)] + [k[2] for k in sorted(out_of_range)] + dead


def in_map(state: GameState, pos: tuple[int, int]) -> bool:
    width, height = state.map_extent
    return 0 <= pos[0] < width and 0 <= pos[1] < height


def destination(unit: UnitState, direction: Direction) -> tuple[int, int]:
    dx, dy = _deltas[direction]
    v = unit.spec.velocity
    return (unit.pos[0] + dx * v, unit.pos[1] + dy * v)


def occupied_cells(state: GameState) -> set[tuple[int, int]]:
    return {u.pos for u in state.units if u.alive}


def legal_actions(
    state: GameState, agent_id: int, occupied: set[tuple[int, int]] | None = None
) -> list[Action]:
    """Legal actions of a living agent, ordered by action-space index.

    HOLD is always legal, so the result is never empty.
    """
    me = _check_alive(state, agent_id)
    if occupied is None:
        occupied = occupied_cells(state)
    actions = []
    for direction in Direction:
        dest = destination(me, direction)
        if in_map(state, dest) and dest not in occupied:
            actions.append(Action.move(direction))
    if me.cooldown == 0:
        for slot, target in enumerate(enemy_order(state, agent_id)):
            enemy = state.units[target]
            if not enemy.alive or chebyshev(me.pos, enemy.pos) > me.spec.weapon_range:
                # The ordering puts every attackable target ahead of these.
                break
            actions.append(Action.attack(slot))
    actions.append(HOLD)
    return actions


def _validate(state: GameState, team: Team, joint: JointAction):
    living = state.living(team)
    if set(joint) != set(living):
        raise IllegalAction(
            f"{team.name} joint action covers {sorted(joint)}, living agents are {living}"
        )
    occupied = occupied_cells(state)
    for agent_id in living:
        if joint[agent_id] not in legal_actions(state, agent_id, occupied):
            raise IllegalAction(
                f"Action '{joint[agent_id].code()}' is illegal for agent {agent_id}"
            )


def resolve_step(
    state: GameState, allied: JointAction, enemy: JointAction, validate: bool = True
) -> tuple[GameState, list[AttackEvent]]:
    """Advances one simultaneous step and reports every resolved attack.

    Resolution order: attacks against the pre-step snapshot, damage, moves of
    surviving non-attackers, cooldowns, step counter.
    """
    if state.terminal:
        raise AlreadyTerminal(f"State at step {state.step} is terminal")
    if validate:
        _validate(state, Team.ALLIED, allied)
        _validate(state, Team.ENEMY, enemy)
    actions = {**allied, **enemy}
    order = sorted(actions)

    assigned: dict[int, int] = defaultdict(int)
    events = []
    attackers = set()
    for agent_id in order:
        action = actions[agent_id]
        if action.kind is not ActionKind.ATTACK:
            continue
        target = enemy_order(state, agent_id)[action.target_slot]
        damage = state.units[agent_id].spec.damage
        invalid = state.units[target].hp <= assigned[target]
        assigned[target] += damage
        attackers.add(agent_id)
        events.append(AttackEvent(agent_id, target, damage, invalid))

    hp = [max(0, u.hp - assigned[i]) for i, u in enumerate(state.units)]

    # Cells held by survivors after the damage phase block movement; among
    # units entering the same free cell the lowest id wins.
    occupied = {u.pos for i, u in enumerate(state.units) if hp[i] > 0}
    claims: dict[tuple[int, int], int] = {}
    for agent_id in order:
        action = actions[agent_id]
        if action.kind is not ActionKind.MOVE or hp[agent_id] == 0:
            continue
        dest = destination(state.units[agent_id], action.direction)
        if dest not in occupied and dest not in claims:
            claims[dest] = agent_id
    moved = {agent_id: dest for dest, agent_id in claims.items()}

    units = []
    for i, u in enumerate(state.units):
        if hp[i] == 0:
            cooldown = 0
        elif i in attackers:
            cooldown = u.spec.max_cooldown
        else:
            cooldown = max(0, u.cooldown - 1)
        units.append(replace(u, hp=hp[i], pos=moved.get(i, u.pos), cooldown=cooldown))
    return replace(state, units=tuple(units), step=state.step + 1), events


def step(state: GameState, allied: JointAction, enemy: JointAction) -> GameState:
    return resolve_step(state, allied, enemy)[0]


_BLOCK = 9


def _unit_block(unit: UnitState, origin: tuple[int, int] | None) -> list[float]:
    if not unit.alive:
        return [0.0] * _BLOCK
    x, y = unit.pos
    if origin is not None:
        x, y = x - origin[0], y - origin[1]
    s = unit.spec
    return [
        s.max_hp,
        s.velocity,
        s.damage,
        s.max_cooldown,
        s.damage_per_frame,
        unit.hp,
        x,
        y,
        unit.cooldown,
    ]


def _team_stats(state: GameState, team: Team, origin: tuple[int, int]) -> list[float]:
    living = [state.units[i] for i in state.living(team)]
    if not living:
        return [0.0] * 5
    hps = [u.hp for u in living]
    cx = sum(u.pos[0] for u in living) / len(living) - origin[0]
    cy = sum(u.pos[1] for u in living) / len(living) - origin[1]
    return [sum(hps) / len(hps), min(hps), max(hps), cx, cy]


def feature_size(num_allies: int, num_enemies: int) -> int:
    return _BLOCK * (num_allies + num_enemies) + 10


def features(state: GameState, agent_id: int) -> np.ndarray:
    """Agent-centric feature vector.

    Four parts: own properties, enemies in attack-slot order, other allies by
    ascending distance, then hp mean/min/max and center per side (own side
    first). Everything except the agent's own position is relative to it.
    """
    me = _check_alive(state, agent_id)
    origin = me.pos
    parts = _unit_block(me, None)
    for i in enemy_order(state, agent_id):
        parts += _unit_block(state.units[i], origin)
    allies = [
        i for i in state.team_indices(me.team) if i != agent_id
    ]
    allies.sort(key=lambda i: (not state.units[i].alive, dist2(origin, state.units[i].pos), i))
    for i in allies:
        parts += _unit_block(state.units[i], origin)
    parts += _team_stats(state, me.team, origin)
    parts += _team_stats(state, me.team.opponent(), origin)
    return np.asarray(parts, dtype=np.float64)


def state_to_dict(state: GameState) -> dict:
    return {
        "map_extent": list(state.map_extent),
        "step": state.step,
        "max_steps": state.max_steps,
        "units": [
            {
                "team": u.team.name.lower(),
                "unit_id": u.unit_id,
                "hp": u.hp,
                "pos": list(u.pos),
                "cooldown": u.cooldown,
                "spec": [
                    u.spec.max_hp,
                    u.spec.damage,
                    u.spec.weapon_range,
                    u.spec.velocity,
                    u.spec.max_cooldown,
                ],
            }
            for u in state.units
        ],
    }


def state_from_dict(data: dict) -> GameState:
    units = tuple(
        UnitState(
            spec=UnitSpec(*u["spec"]),
            hp=u["hp"],
            pos=tuple(u["pos"]),
            cooldown=u["cooldown"],
            team=Team[u["team"].upper()],
            unit_id=u["unit_id"],
        )
        for u in data["units"]
    )
    return GameState(
        units=units,
        map_extent=tuple(data["map_extent"]),
        step=data["step"],
        max_steps=data["max_steps"],
    )


def state_hash(state: GameState) -> str:
    """Stable content hash, independent of Python's per-process hash seed."""
    h = hashlib.sha256()
    h.update(f"{state.map_extent}|{state.step}|{state.max_steps}".encode())
    for u in state.units:
        s = u.spec
        h.update(
            f"|{u.team.name}{u.unit_id}:{u.hp},{u.pos},{u.cooldown},"
            f"{s.max_hp},{s.damage},{s.weapon_range},{s.velocity},{s.max_cooldown}".encode()
        )
    return h.hexdigest()[:16]
