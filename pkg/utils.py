import json
import math
import random
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable

import numpy as np
import torch

import config


def utcnow_iso() -> str:
    """Return current UTC time as ISO string"""
    return datetime.now(timezone.utc).isoformat()


def log_info(tag: str, message: str):
    if not config.QUIET:
        print(f"[{tag}] {message}", file=sys.stderr)


def log_warning(tag: str, message: str):
    print(f"[{tag}] WARNING: {message}", file=sys.stderr)


def seed_everything(seed: int):
    """Seed every RNG the pipeline touches and pin torch threads"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, config.NUM_THREADS))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _make_json_safe(obj: Any) -> Any:
    """Convert numpy scalars/arrays and paths into JSON-safe values"""
    if obj is None or isinstance(obj, (str, bool, int)):
        return obj
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else str(obj)
    if isinstance(obj, np.generic):
        return _make_json_safe(obj.item())
    if isinstance(obj, np.ndarray):
        return [_make_json_safe(v) for v in obj.tolist()]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(k): _make_json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_make_json_safe(item) for item in obj]
    return str(obj)


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_make_json_safe(rec), sort_keys=True) + "\n")


def append_jsonl(path: Path, record: Dict[str, Any]):
    with open(path, "a") as fh:
        fh.write(json.dumps(_make_json_safe(record), sort_keys=True) + "\n")


def write_json(path: Path, obj: Any):
    with open(path, "w") as fh:
        json.dump(_make_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
