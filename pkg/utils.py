import hashlib
import json
import math
import random
import zlib
from typing import Any

import numpy as np
import torch
from loguru import logger

from config import FLOAT_SIGNIFICANT_DIGITS
from exceptions import ConfigurationError, NumericError


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seed every RNG the framework touches and optionally force deterministic kernels.

    Args:
        seed: The single run seed; all randomness flows from it.
        deterministic: When true, ask torch for deterministic algorithms and disable
            cuDNN autotuning so repeated runs produce identical scores.
    """

    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False
    logger.debug('随机种子已设置为 {} (deterministic={})', seed, deterministic)


def task_seed(seed: int, task_id: str) -> np.random.SeedSequence:
    """Per-task seed stream, independent of registry order."""
    if seed < 0:
        raise ConfigurationError('派生任务种子', f'种子必须为非负整数，得到 {seed}', 'seed')
    return np.random.SeedSequence([seed, zlib.crc32(task_id.encode('utf-8'))])


def config_hash(payload: dict[str, Any]) -> str:
    """SHA-256 over the canonical JSON form (sorted keys, compact separators)."""
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'), ensure_ascii=False)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def round_sig(value: float | None, digits: int = FLOAT_SIGNIFICANT_DIGITS) -> float | None:
    if value is None:
        return None
    value = float(value)
    if value == 0.0 or not math.isfinite(value):
        return value
    return float(f'{value:.{digits}g}')


def format_sig(value: float | None, digits: int = FLOAT_SIGNIFICANT_DIGITS) -> str:
    if value is None:
        return 'n/a'
    return f'{float(value):.{digits}g}'


def ensure_finite(tensor: torch.Tensor, action_name: str, **context: Any) -> None:
    if not bool(torch.isfinite(tensor).all()):
        raise NumericError(action_name, '出现非有限数值 (NaN/Inf)', **context)


def resolve_device(name: str | None = None) -> torch.device:
    if name:
        return torch.device(name)
    return torch.device('cuda' if torch.cuda.is_available() else 'cpu')
