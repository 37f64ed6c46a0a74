import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger
from pydantic import ValidationError

from asr.errors import ModelValidationError
from . import model_service

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated list of integers: {e}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asr",
        description="Action-sufficient state representations for linear-Gaussian POMDPs",
    )
    parser.add_argument("--verbose", action="store_true", help="Log per-iteration detail (DEBUG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Roll out random-policy trajectories to JSON-lines")
    p.add_argument("--params", type=Path, required=True, help="Ground-truth params JSON")
    p.add_argument("--steps", "--T", dest="T", type=int, required=True, help="Steps per episode")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("identify", help="Recover identifiable quantities from trajectory moments")
    p.add_argument("--traj", "--data", dest="data", type=Path, required=True, help="Trajectories JSON-lines")
    p.add_argument("--lags", "--K", dest="K", type=int, default=6, help="Largest moment lag")
    p.add_argument("--dstate", "--d-state", dest="d_state", type=int, default=None)
    p.add_argument("--k-max", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("asr", help="ASR of a structural graph (1-based indices)")
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--gamma", type=float, default=0.99)

    p = sub.add_parser("learn", help="Fit the structured sequential objective")
    p.add_argument("--traj", "--data", dest="data", type=Path, required=True, help="Trajectories JSON-lines")
    p.add_argument("--config", type=Path, default=None, help="Learning config JSON")
    p.add_argument("--dstate", "--d-state", dest="d_state", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="Learned model JSON")
    p.add_argument("--history-out", type=Path, default=None, help="Loss history CSV")

    p = sub.add_parser("train-policy", help="Q-learning (optionally Dyna) on ASR beliefs")
    p.add_argument("--env-params", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="Learned model or params JSON")
    p.add_argument("--asr", type=str, default=None, help='1-based dims, e.g. "2,3" (default: all)')
    p.add_argument("--config", type=Path, default=None, help="Policy config JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--curve-out", type=Path, required=True)
    p.add_argument("--policy-out", type=Path, default=Path("policy.joblib"))

    p = sub.add_parser("eval", help="Greedy evaluation of a saved policy")
    p.add_argument("--env-params", type=Path, required=True)
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--oracle", action="store_true", help="Evaluate the true-model optimal action instead")

    p = sub.add_parser("pipeline", help="Run every stage from one experiment config")
    p.add_argument("--config", type=Path, required=True)

    p = sub.add_parser("benchmark", help="Emit a named benchmark, or sweep it over seeds")
    p.add_argument("--name", required=True, choices=["figure1", "random-d4", "random-d5-sparse", "steering-toy"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sweep", action="store_true", help="Run the full pipeline for every seed in --seeds")
    p.add_argument("--seeds", type=_seeds, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _dispatch(args: argparse.Namespace):
    if args.command == "simulate":
        return model_service.simulate(args.params, args.T, args.episodes, args.seed, args.out)
    if args.command == "identify":
        return model_service.identify(args.data, args.K, args.d_state, args.k_max, args.out)
    if args.command == "asr":
        return model_service.characterize_asr(args.graph, args.gamma)
    if args.command == "learn":
        return model_service.learn(args.data, args.config, args.seed, args.out, args.d_state, args.history_out)
    if args.command == "train-policy":
        return model_service.train_policy(args.env_params, args.model, args.asr, args.config, args.seed,
                                          args.curve_out, args.policy_out)
    if args.command == "eval":
        return model_service.eval_policy(args.env_params, args.policy, args.episodes, args.seed,
                                         args.oracle).model_dump()
    if args.command == "pipeline":
        return model_service.run_pipeline(model_service.load_config(args.config)).model_dump()
    if args.command == "benchmark":
        if args.sweep:
            if not args.seeds:
                raise ModelValidationError("--sweep needs --seeds")
            return model_service.sweep(args.name, args.seeds, args.jobs, args.out).to_dict(orient="records")
        if args.seed is None:
            raise ModelValidationError("--seed is required")
        return model_service.make_benchmark(args.name, args.seed, args.out).model_dump()
    raise ModelValidationError(f"unknown command {args.command}")


def _is_validation(e: BaseException) -> bool:
    while e is not None:
        if isinstance(e, (ModelValidationError, ValidationError)):
            return True
        e = e.__cause__
    return False


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if args.verbose else "INFO")
    try:
        result = _dispatch(args)
    except Exception as e:
        if _is_validation(e):
            logger.error(f"Invalid input: {e}")
            return EXIT_VALIDATION
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
    sys.stdout.write(json.dumps(result, indent=2, default=str) + "\n")
    return EXIT_OK
