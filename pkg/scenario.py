from __future__ import annotations
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
import yaml

from engine import GameState, Team, UnitSpec, UnitState, EngineError


class ScenarioError(Exception):
    pass


MARINE = UnitSpec(max_hp=40, damage=6, weapon_range=4, velocity=1, max_cooldown=2)


class Stream(IntEnum):
    """Independent spawn streams, so training episodes and recorded
    demonstrations never replay the layouts of evaluation battles."""

    EVALUATION = 0
    TRAINING = 1
    DEMONSTRATION = 2


@dataclass(frozen=True)
class Roster:
    count: int
    spec: UnitSpec
    base: tuple[int, int]
    radius: int


@dataclass(frozen=True)
class Scenario:
    name: str
    map_extent: tuple[int, int]
    allied: Roster
    enemy: Roster
    max_steps: int = 200
    seed: int = 0
    battles: int = 100

    def __post_init__(self):
        width, height = self.map_extent
        for team, roster in (("allied", self.allied), ("enemy", self.enemy)):
            if roster.count < 1:
                raise ScenarioError(f"{self.name}: {team} roster is empty")
            bx, by = roster.base
            if not (0 <= bx < width and 0 <= by < height):
                raise ScenarioError(f"{self.name}: {team} base {roster.base} is off-map")
            if roster.radius < 0:
                raise ScenarioError(f"{self.name}: {team} spawn radius is negative")
        if self.max_steps < 1:
            raise ScenarioError(f"{self.name}: max_steps must be positive")

    def roster(self, team: Team) -> Roster:
        return self.allied if team is Team.ALLIED else self.enemy

    @property
    def num_allies(self) -> int:
        return self.allied.count

    @property
    def num_enemies(self) -> int:
        return self.enemy.count

    def spawn(
        self, seed: int | None = None, index: int = 0, stream: Stream = Stream.EVALUATION
    ) -> GameState:
        """Initial state of battle `index` under `seed` in `stream`.

        Units are drawn uniformly from the square of the given radius around
        their team's base point (clipped to the map); draws that land on an
        occupied cell are redrawn from the same stream.
        """
        rng = np.random.default_rng([self.seed if seed is None else seed, index, int(stream)])
        width, height = self.map_extent
        taken: set[tuple[int, int]] = set()
        units = []
        for team in (Team.ALLIED, Team.ENEMY):
            roster = self.roster(team)
            bx, by = roster.base
            xs = range(max(0, bx - roster.radius), min(width, bx + roster.radius + 1))
            ys = range(max(0, by - roster.radius), min(height, by + roster.radius + 1))
            free = [(x, y) for x in xs for y in ys if (x, y) not in taken]
            if len(free) < roster.count:
                raise ScenarioError(
                    f"{self.name}: {roster.count} {team.name.lower()} units do not fit "
                    f"within radius {roster.radius} of {roster.base}"
                )
            for unit_id in range(roster.count):
                while True:
                    pos = (int(rng.integers(xs.start, xs.stop)), int(rng.integers(ys.start, ys.stop)))
                    if pos not in taken:
                        break
                taken.add(pos)
                units.append(
                    UnitState(
                        spec=roster.spec,
                        hp=roster.spec.max_hp,
                        pos=pos,
                        cooldown=0,
                        team=team,
                        unit_id=unit_id,
                    )
                )
        return GameState(
            units=tuple(units),
            map_extent=self.map_extent,
            step=0,
            max_steps=self.max_steps,
        )


def _mirror(name: str, allies: int, enemies: int, extent: tuple[int, int], radius: int) -> Scenario:
    width, height = extent
    return Scenario(
        name=name,
        map_extent=extent,
        allied=Roster(allies, MARINE, (2, height // 2), radius),
        enemy=Roster(enemies, MARINE, (width - 3, height // 2), radius),
    )


# Desk-scale suite.
BUILTIN = {
    s.name: s
    for s in (
        _mirror("m1v1", 1, 1, (8, 8), 1),
        _mirror("m2v2", 2, 2, (12, 12), 2),
        _mirror("m3v3", 3, 3, (12, 12), 2),
        _mirror("m5v5", 5, 5, (16, 16), 2),
        _mirror("m4v5", 4, 5, (16, 16), 2),
    )
}


def _roster_from_dict(name: str, team: str, data: dict) -> Roster:
    try:
        unit = data.get("unit", {})
        spec = UnitSpec(
            max_hp=int(unit.get("max_hp", MARINE.max_hp)),
            damage=int(unit.get("damage", MARINE.damage)),
            weapon_range=int(unit.get("weapon_range", MARINE.weapon_range)),
            velocity=int(unit.get("velocity", MARINE.velocity)),
            max_cooldown=int(unit.get("max_cooldown", MARINE.max_cooldown)),
        )
        return Roster(
            count=int(data["count"]),
            spec=spec,
            base=(int(data["base"][0]), int(data["base"][1])),
            radius=int(data.get("radius", 0)),
        )
    except (KeyError, TypeError, ValueError, EngineError) as e:
        raise ScenarioError(f"{name}: bad {team} roster: {e}") from e


def scenario_from_dict(data: dict) -> Scenario:
    name = str(data.get("name", "scenario"))
    try:
        extent = (int(data["map"][0]), int(data["map"][1]))
        allied = _roster_from_dict(name, "allied", data["allied"])
        enemy = _roster_from_dict(name, "enemy", data["enemy"])
    except (KeyError, TypeError, IndexError) as e:
        raise ScenarioError(f"{name}: missing or malformed field {e}") from e
    return Scenario(
        name=name,
        map_extent=extent,
        allied=allied,
        enemy=enemy,
        max_steps=int(data.get("max_steps", 200)),
        seed=int(data.get("seed", 0)),
        battles=int(data.get("battles", 100)),
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    def roster(r: Roster) -> dict:
        s = r.spec
        return {
            "count": r.count,
            "base": list(r.base),
            "radius": r.radius,
            "unit": {
                "max_hp": s.max_hp,
                "damage": s.damage,
                "weapon_range": s.weapon_range,
                "velocity": s.velocity,
                "max_cooldown": s.max_cooldown,
            },
        }

    return {
        "name": scenario.name,
        "map": list(scenario.map_extent),
        "max_steps": scenario.max_steps,
        "seed": scenario.seed,
        "battles": scenario.battles,
        "allied": roster(scenario.allied),
        "enemy": roster(scenario.enemy),
    }


def load_scenario(source: str | Path) -> Scenario:
    """Loads a scenario by built-in name or from a YAML file."""
    if isinstance(source, str) and source in BUILTIN:
        return BUILTIN[source]
    path = Path(source)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ScenarioError(f"Cannot read scenario {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ScenarioError(f"Malformed scenario {path}: {e}") from e
    if not isinstance(data, dict):
        raise ScenarioError(f"Scenario {path} must be a mapping")
    return scenario_from_dict(data)
