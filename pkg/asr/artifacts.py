"""Reading and writing stage artifacts (JSON, JSON-lines, CSV, joblib)."""

import json
from pathlib import Path
from typing import Any, Dict, Union

import joblib
import pandas as pd
from loguru import logger

from .errors import ModelValidationError
from .linear_env import TrajectoryBatch

PathLike = Union[str, Path]


def write_json(path: PathLike, data: Any):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    logger.debug(f"Wrote {path}")


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise ModelValidationError(f"file not found: {path}")
    return json.loads(path.read_text())


def write_trajectories(path: PathLike, batch: TrajectoryBatch):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in batch.to_records():
            fh.write(json.dumps(rec) + "\n")
    logger.debug(f"Wrote {len(batch)} episodes to {path}")


def read_trajectories(path: PathLike) -> TrajectoryBatch:
    path = Path(path)
    if not path.exists():
        raise ModelValidationError(f"file not found: {path}")
    with path.open() as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return TrajectoryBatch.from_records(records)


def write_csv(path: PathLike, frame: pd.DataFrame):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


def save_policy(path: PathLike, bundle: Dict[str, Any]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(bundle, path)
    logger.debug(f"Saved policy to {path}")


def load_policy(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ModelValidationError(f"policy file not found: {path}")
    return joblib.load(path)


def json_ready(value: Any) -> Any:
    """Nested containers with numpy scalars and arrays turned into plain Python values"""
    if isinstance(value, dict):
        return {str(k): json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_ready(v) for v in value]
    if hasattr(value, "tolist"):
        return value.tolist()
    return value
