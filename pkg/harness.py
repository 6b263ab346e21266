from __future__ import annotations
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import partial
from pathlib import Path
import argparse
import json
import logging
import sys
import time

import numpy as np

from demonstrators import (
    DemonstrationError,
    ImitationConfig,
    fit_imitation,
    heuristic,
    imitation_agreement,
    load_demonstration,
    record_demonstration,
    save_demonstration,
)
from engine import Team, normalized_reward, resolve_step, terminal_reward
from game_theory import (
    GameTheoryError,
    PayoffTensor,
    brute_force_pne,
    tensor_best_response,
)
from learner import ConfigError, TrainConfig, load_train_config, train
from network import NetConfig, NetworkPolicy, NonFiniteLoss, load_checkpoint, save_checkpoint
from policy import PolicyHandle
from scenario import Scenario, ScenarioError, load_scenario
from value import Backing, check_lemma1

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_CHECK_FAILED = 3


class MissingLogs(Exception):
    pass


@dataclass
class BattleRecord:
    index: int
    win: bool
    reward: int
    normalized_reward: float
    steps: int
    # Allied attacks resolved, and how many of them were overkill.
    attacks: int | None
    invalid_attacks: int | None


@dataclass
class EvalReport:
    scenario: str
    allied: str
    enemy: str
    seed: int
    battles: int
    win_rate: float
    mean_normalized_reward: float
    invalid_attack_ratio: float
    records: list[BattleRecord]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_dict(data: dict) -> EvalReport:
        records = [BattleRecord(**r) for r in data.get("records", [])]
        return EvalReport(**{**data, "records": records})


def play_battle(
    allied: PolicyHandle, enemy: PolicyHandle, scenario: Scenario, seed: int, index: int
) -> tuple[BattleRecord, float]:
    """One greedy battle; also returns the mean allied decision latency."""
    initial = state = scenario.spawn(seed, index)
    attacks = invalid = 0
    thinking = 0.0
    decisions = 0
    while not state.terminal:
        start = time.perf_counter()
        allied_action = allied.team_action(state, Team.ALLIED)
        thinking += time.perf_counter() - start
        decisions += 1
        state, events = resolve_step(state, allied_action, enemy.team_action(state, Team.ENEMY))
        for event in events:
            if state.units[event.attacker].team is Team.ALLIED:
                attacks += 1
                invalid += event.invalid
    reward = terminal_reward(state)
    record = BattleRecord(
        index=index,
        win=reward > 0,
        reward=reward,
        normalized_reward=normalized_reward(state, initial),
        steps=state.step,
        attacks=attacks,
        invalid_attacks=invalid,
    )
    return record, thinking / max(decisions, 1)


def invalid_attack_ratio(report: EvalReport) -> float:
    if not report.records or any(r.attacks is None for r in report.records):
        raise MissingLogs(f"Report for {report.allied} carries no attack logs")
    total = sum(r.attacks for r in report.records)
    if total == 0:
        return 0.0
    return sum(r.invalid_attacks for r in report.records) / total


def evaluate(
    allied: PolicyHandle,
    enemy: PolicyHandle,
    scenario: Scenario,
    battles: int,
    seed: int,
    workers: int = 1,
) -> EvalReport:
    """Plays seeded battles with greedy legal actions on both sides.

    Draws count as losses for the win rate.
    """
    if battles < 1:
        raise ValueError(f"battles must be >= 1, got {battles}")
    play = partial(play_battle, allied, enemy, scenario, seed)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(play, range(battles)))
    else:
        results = [play(i) for i in range(battles)]
    records = [r for r, _ in results]
    latency = float(np.mean([t for _, t in results]))
    report = EvalReport(
        scenario=scenario.name,
        allied=allied.name,
        enemy=enemy.name,
        seed=seed,
        battles=battles,
        win_rate=sum(r.win for r in records) / battles,
        mean_normalized_reward=sum(r.normalized_reward for r in records) / battles,
        invalid_attack_ratio=0.0,
        records=records,
    )
    report.invalid_attack_ratio = invalid_attack_ratio(report)
    logger.info(
        "%s vs %s on %s: W %.3f R %.3f invalid %.3f over %d battles (%.2f ms per decision)",
        allied.name, enemy.name, scenario.name, report.win_rate,
        report.mean_normalized_reward, report.invalid_attack_ratio, battles, latency * 1e3,
    )
    return report


def run_ablation(
    scenario: Scenario,
    cfg: TrainConfig,
    demonstration: PolicyHandle,
    opponent: PolicyHandle,
    battles: int,
    seed: int,
    net_config: NetConfig = NetConfig(),
    modes: tuple[Backing, ...] = tuple(Backing),
) -> dict[str, EvalReport]:
    """Trains one model per Q backing with everything else equal and
    evaluates each on the same battles, drawn from the evaluation stream."""
    reports = {}
    for mode in modes:
        logger.info("ablation: training with %s", mode.value)
        result = train(scenario, demonstration, opponent, replace(cfg, backing=mode.value), net_config)
        policy = NetworkPolicy(result.net, name=f"learned[{mode.value}]")
        reports[mode.value] = evaluate(policy, opponent, scenario, battles, seed)
    return reports


def fewer_overkills(report: EvalReport, baseline: EvalReport) -> bool:
    """Whether `report` wastes a smaller share of its attacks than `baseline`.

    A policy that never attacks has nothing to compare and fails.
    """
    attacks = sum(r.attacks or 0 for r in report.records)
    logger.info(
        "%s: W %.3f, %d attacks, invalid %.3f; %s: W %.3f, invalid %.3f",
        report.allied, report.win_rate, attacks, report.invalid_attack_ratio,
        baseline.allied, baseline.win_rate, baseline.invalid_attack_ratio,
    )
    if attacks == 0:
        logger.warning("%s never attacked", report.allied)
        return False
    return report.invalid_attack_ratio < baseline.invalid_attack_ratio


def ablation_holds(reports: dict[str, EvalReport]) -> bool:
    full = reports[Backing.COMBINED.value].win_rate
    demo = reports[Backing.DEMO.value].win_rate
    theta = reports[Backing.THETA.value].win_rate
    return full >= demo - 0.05 and demo >= theta + 0.10


@dataclass
class Matchup:
    demonstrator: str
    opponent: str
    trained: EvalReport
    baseline: EvalReport

    def improved(self, margin: float = 0.15) -> bool:
        return (
            self.trained.win_rate >= self.baseline.win_rate + margin
            and self.trained.mean_normalized_reward >= self.baseline.mean_normalized_reward
        )


def demonstration_policy(
    name: str,
    opponent: PolicyHandle,
    scenario: Scenario,
    modality: str,
    seed: int,
    demo_episodes: int = 50,
    net_config: NetConfig = NetConfig(),
) -> PolicyHandle:
    """(H) uses the heuristic itself; (O) fits the network to its recorded play."""
    rule = heuristic(name)
    if modality == "H":
        return rule
    if modality != "O":
        raise ConfigError(f"Unknown demonstration modality '{modality}'")
    demo = record_demonstration(scenario, rule, opponent, demo_episodes, seed)
    fitted = fit_imitation(demo, net_config, ImitationConfig(seed=seed)).policy
    fitted.name = f"imitation[{name}]"
    return fitted


def cross_validation_run(
    scenario: Scenario,
    cfg: TrainConfig,
    battles: int,
    seed: int,
    modality: str = "H",
    demo_episodes: int = 50,
    net_config: NetConfig = NetConfig(),
) -> list[Matchup]:
    """Learns from each demonstrator and fights the other one, next to the
    plain demonstrator-vs-opponent baseline on the same battles.

    Training episodes come from the training spawn stream, so evaluation
    battles are seeded independently of every training episode.
    """
    matchups = []
    for demo_name, opp_name in (("closest", "weakest"), ("weakest", "closest")):
        opponent = heuristic(opp_name)
        demonstration = demonstration_policy(
            demo_name, opponent, scenario, modality, seed, demo_episodes, net_config
        )
        result = train(scenario, demonstration, opponent, cfg, net_config)
        trained = evaluate(
            NetworkPolicy(result.net, name=f"learned[{demo_name}]"), opponent, scenario, battles, seed
        )
        baseline = evaluate(heuristic(demo_name), opponent, scenario, battles, seed)
        matchups.append(Matchup(demo_name, opp_name, trained, baseline))
    return matchups


def _write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s", path)


def _train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, total_steps=args.steps)
    return cfg


def _seed(args, scenario: Scenario) -> int:
    return scenario.seed if args.seed is None else args.seed


def cmd_demo_record(args, scenario: Scenario) -> int:
    demo = record_demonstration(
        scenario, heuristic(args.heuristic), heuristic(args.opponent), args.episodes, _seed(args, scenario)
    )
    save_demonstration(demo, args.out / "demonstration.jsonl")
    return EXIT_OK


def cmd_imitate(args, scenario: Scenario) -> int:
    demo = load_demonstration(args.demo or args.out / "demonstration.jsonl")
    seed = _seed(args, scenario)
    config = ImitationConfig(epochs=args.epochs, learning_rate=args.lr, seed=seed)
    result = fit_imitation(demo, NetConfig(seed=seed), config)
    save_checkpoint(result.policy.net, args.out / "imitation.npz")
    # Held-out battles use seeds the demonstration never saw.
    agreement = imitation_agreement(
        result.policy, heuristic(args.heuristic), scenario, heuristic(args.opponent),
        args.agreement_episodes, seed + 1,
    )
    _write_json(
        args.out / "imitation.json",
        {
            "records": len(demo),
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
            "held_out_agreement": agreement,
        },
    )
    if args.check and agreement < 0.9:
        logger.error("held-out agreement %.3f is below 0.9", agreement)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_train(args, scenario: Scenario) -> int:
    cfg = _train_config(args)
    opponent = heuristic(args.opponent)
    if args.modality == "O" and args.demo_checkpoint:
        demonstration = NetworkPolicy(load_checkpoint(args.demo_checkpoint), name="imitation")
    else:
        demonstration = demonstration_policy(
            args.demonstrator, opponent, scenario, args.modality, cfg.seed, args.demo_episodes
        )
    log_path = args.out / "train_log.csv"
    train(
        scenario, demonstration, opponent, cfg, NetConfig(seed=cfg.seed),
        log_path=log_path, checkpoint_path=args.out / "policy.npz",
    )
    return EXIT_OK


def cmd_evaluate(args, scenario: Scenario) -> int:
    seed = _seed(args, scenario)
    battles = args.battles or scenario.battles
    if args.checkpoint:
        allied = NetworkPolicy(load_checkpoint(args.checkpoint), name=Path(args.checkpoint).stem)
    else:
        allied = heuristic(args.allied)
    enemy = heuristic(args.opponent)
    report = evaluate(allied, enemy, scenario, battles, seed, args.workers)
    (args.out / "eval.json").write_text(report.to_json())
    if args.baseline:
        baseline = evaluate(heuristic(args.baseline), enemy, scenario, battles, seed, args.workers)
        (args.out / "baseline_eval.json").write_text(baseline.to_json())
        if args.check and not fewer_overkills(report, baseline):
            logger.error(
                "invalid attack ratio %.3f is not below the baseline's %.3f",
                report.invalid_attack_ratio, baseline.invalid_attack_ratio,
            )
            return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_ablate(args, scenario: Scenario) -> int:
    cfg = _train_config(args)
    reports = run_ablation(
        scenario, cfg, heuristic(args.demonstrator), heuristic(args.opponent),
        args.battles or scenario.battles, _seed(args, scenario), NetConfig(seed=cfg.seed),
    )
    _write_json(args.out / "ablation.json", {mode: r.to_dict() for mode, r in reports.items()})
    if args.check and not ablation_holds(reports):
        logger.error("ablation ordering does not hold")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_crossval(args, scenario: Scenario) -> int:
    cfg = _train_config(args)
    matchups = cross_validation_run(
        scenario, cfg, args.battles or scenario.battles, _seed(args, scenario),
        args.modality, args.demo_episodes, NetConfig(seed=cfg.seed),
    )
    _write_json(
        args.out / "crossval.json",
        {
            f"{m.demonstrator}_vs_{m.opponent}": {
                "trained": m.trained.to_dict(),
                "baseline": m.baseline.to_dict(),
                "improved": m.improved(),
            }
            for m in matchups
        },
    )
    if args.check and not any(m.improved() for m in matchups):
        logger.error("no direction improves on its demonstrator")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_lemma1(args, scenario: Scenario) -> int:
    cfg = _train_config(args)
    report = check_lemma1(
        scenario, heuristic(args.demonstrator), heuristic(args.opponent),
        args.samples, _seed(args, scenario), cfg.discount, cfg.iterations,
    )
    _write_json(args.out / "lemma1.json", report.to_dict())
    if args.check and report.violations:
        logger.error("%d violations, largest %.3f", report.violations, report.max_violation)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_oracle_pne(args, scenario: Scenario) -> int:
    if args.payoffs:
        tensor = PayoffTensor.from_text(Path(args.payoffs).read_text())
    else:
        rng = np.random.default_rng(_seed(args, scenario))
        tensor = PayoffTensor.random(rng, tuple(args.random))
    equilibria = sorted(brute_force_pne(tensor))
    profile = tensor_best_response(tensor, (0,) * tensor.num_agents, args.iterations)
    found = tuple(profile.joint_action[g] for g in range(tensor.num_agents))
    _write_json(
        args.out / "oracle_pne.json",
        {
            "actions": list(tensor.actions),
            "pne": [list(j) for j in equilibria],
            "best_response": list(found),
            "fixed_point": profile.converged,
            "agrees": found in equilibria,
        },
    )
    print(f"PNE: {equilibria}")
    print(f"best response: {found} (fixed point: {profile.converged})")
    if args.check and profile.converged and found not in equilibria:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harness",
        description="Multi-agent learning from sub-optimal demonstrations on a micro-combat grid.",
    )
    parser.add_argument("--scenario", default="m3v3", help="built-in scenario name or YAML file")
    parser.add_argument("--seed", type=int, default=None, help="overrides scenario and config seeds")
    parser.add_argument("--config", default=None, help="training config YAML")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def pairing(p, demonstrator_flag: str = "--demonstrator"):
        p.add_argument(demonstrator_flag, default="closest", choices=["closest", "weakest"])
        p.add_argument("--opponent", default="weakest", choices=["closest", "weakest"])

    p = sub.add_parser("demo-record", help="record heuristic play")
    pairing(p, "--heuristic")
    p.add_argument("--episodes", type=int, default=50)
    p.set_defaults(handler=cmd_demo_record)

    p = sub.add_parser("imitate", help="fit the network to a recorded demonstration")
    pairing(p, "--heuristic")
    p.add_argument("--demo", type=Path, default=None)
    p.add_argument("--epochs", type=int, default=ImitationConfig.epochs)
    p.add_argument("--lr", type=float, default=ImitationConfig.learning_rate)
    p.add_argument("--agreement-episodes", type=int, default=20)
    p.add_argument("--check", action="store_true")
    p.set_defaults(handler=cmd_imitate)

    p = sub.add_parser("train", help="train the decentralized policy")
    pairing(p)
    p.add_argument("--modality", default="H", choices=["H", "O"])
    p.add_argument("--demo-checkpoint", default=None, help="imitation checkpoint for modality O")
    p.add_argument("--demo-episodes", type=int, default=50)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint or a heuristic")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--allied", default="closest", choices=["closest", "weakest"])
    p.add_argument("--opponent", default="weakest", choices=["closest", "weakest"])
    p.add_argument("--baseline", default=None, choices=["closest", "weakest"])
    p.add_argument("--battles", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--check", action="store_true")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare Q backings")
    pairing(p)
    p.add_argument("--battles", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--check", action="store_true")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("crossval", help="learn from one heuristic, fight the other")
    p.add_argument("--modality", default="H", choices=["H", "O"])
    p.add_argument("--demo-episodes", type=int, default=50)
    p.add_argument("--battles", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--check", action="store_true")
    p.set_defaults(handler=cmd_crossval)

    p = sub.add_parser("lemma1", help="check Q^N >= Q^D on seeded states")
    pairing(p)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--check", action="store_true")
    p.set_defaults(handler=cmd_lemma1)

    p = sub.add_parser("oracle-pne", help="best response against brute-force PNE")
    p.add_argument("--payoffs", default=None, help="payoff tensor text file")
    p.add_argument("--random", type=int, nargs="+", default=[3, 3, 3], help="actions per agent")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--check", action="store_true")
    p.set_defaults(handler=cmd_oracle_pne)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="[%(asctime)s] %(levelname)s %(name)s: %(message)s",
    )
    try:
        scenario = load_scenario(args.scenario)
        args.out.mkdir(parents=True, exist_ok=True)
        return args.handler(args, scenario)
    except NonFiniteLoss as e:
        logger.error("training diverged: %s", e)
        return EXIT_DIVERGED
    except (ConfigError, ScenarioError, DemonstrationError, GameTheoryError, OSError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
