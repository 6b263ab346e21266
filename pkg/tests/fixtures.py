from engine import HOLD, GameState, Team, UnitSpec, UnitState
from policy import HeuristicPolicy
from scenario import Roster, Scenario

SPEC = UnitSpec(max_hp=40, damage=6, weapon_range=4, velocity=1, max_cooldown=2)

# A duel where attacking is strictly better than anything else:
# attack-first ends 10, any other opening ends 5.
DUEL_ALLY = UnitSpec(max_hp=20, damage=5, weapon_range=4, velocity=1, max_cooldown=0)
DUEL_ENEMY = UnitSpec(max_hp=10, damage=5, weapon_range=4, velocity=1, max_cooldown=0)

HOLD_POLICY = HeuristicPolicy("hold", lambda state, agent_id: HOLD)


def _units(team: Team, rows, spec: UnitSpec) -> list[UnitState]:
    units = []
    for unit_id, row in enumerate(rows):
        x, y = row[0], row[1]
        hp = row[2] if len(row) > 2 else spec.max_hp
        cooldown = row[3] if len(row) > 3 else 0
        units.append(UnitState(spec, hp, (x, y), cooldown, team, unit_id))
    return units


def make_state(
    allies,
    enemies,
    extent=(10, 10),
    step=0,
    max_steps=200,
    ally_spec: UnitSpec = SPEC,
    enemy_spec: UnitSpec | None = None,
) -> GameState:
    """Builds a state from (x, y[, hp[, cooldown]]) rows, allies first."""
    units = _units(Team.ALLIED, allies, ally_spec) + _units(Team.ENEMY, enemies, enemy_spec or ally_spec)
    return GameState(tuple(units), extent, step, max_steps)


def duel_state() -> GameState:
    return make_state([(0, 0)], [(1, 0)], extent=(2, 1), ally_spec=DUEL_ALLY, enemy_spec=DUEL_ENEMY)


def duel_scenario() -> Scenario:
    return Scenario(
        name="duel",
        map_extent=(2, 1),
        allied=Roster(1, DUEL_ALLY, (0, 0), 0),
        enemy=Roster(1, DUEL_ENEMY, (1, 0), 0),
        max_steps=20,
    )


SKIRMISH_UNIT = UnitSpec(max_hp=12, damage=4, weapon_range=2, velocity=1, max_cooldown=1)


def skirmish_scenario() -> Scenario:
    return Scenario(
        name="skirmish",
        map_extent=(6, 6),
        allied=Roster(2, SKIRMISH_UNIT, (1, 3), 1),
        enemy=Roster(2, SKIRMISH_UNIT, (4, 3), 1),
        max_steps=20,
    )


TWO_EQUILIBRIA = """
# two agents, two actions each
2 2 2
0 0 1.0
0 1 0.5  # off-diagonal
1 0 0.25
1 1 2.0
"""
