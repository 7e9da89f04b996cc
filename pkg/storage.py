import json
import os
from collections.abc import Mapping
from typing import Any

import numpy as np
import pandas as pd
import torch
from loguru import logger
from torch import nn

from _codec import (
    decode_shape,
    decode_string,
    decode_varint,
    encode_shape,
    encode_string,
    encode_varint,
)
from config import LOG_FILE, META_FILE, WEIGHTS_FILE, WEIGHTS_MAGIC
from exceptions import ManifestError, ShapeError
from models import Checkpoint, MetricReport

_BACKBONE_PREFIX = 'backbone.'


def canonical_state(model: nn.Module) -> dict[str, np.ndarray]:
    """Model parameters under checkpoint names (``backbone.`` prefix removed)."""
    state: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        key = name[len(_BACKBONE_PREFIX):] if name.startswith(_BACKBONE_PREFIX) else name
        state[key] = tensor.detach().cpu().numpy().copy()
    return state


def restore_state(model: nn.Module, parameters: Mapping[str, Any]) -> None:
    own = model.state_dict()
    expected = {
        (name[len(_BACKBONE_PREFIX):] if name.startswith(_BACKBONE_PREFIX) else name): name
        for name in own
    }
    missing = sorted(set(expected) - set(parameters))
    unexpected = sorted(set(parameters) - set(expected))
    if missing or unexpected:
        raise ShapeError(
            '恢复模型参数',
            f'参数表不一致: 缺少 {missing[:3]}{"..." if len(missing) > 3 else ""}，'
            f'多余 {unexpected[:3]}{"..." if len(unexpected) > 3 else ""}',
        )
    with torch.no_grad():
        for key, name in expected.items():
            value = torch.as_tensor(np.asarray(parameters[key]))
            if tuple(value.shape) != tuple(own[name].shape):
                raise ShapeError(
                    '恢复模型参数', f'{key}: 形状 {tuple(value.shape)} != {tuple(own[name].shape)}'
                )
            own[name].copy_(value.to(own[name].dtype))


def encode_weights(parameters: Mapping[str, Any]) -> bytes:
    """Serialize a named-parameter map: name table first, then float32 LE payloads."""
    arrays = [(name, np.asarray(value, dtype='<f4')) for name, value in parameters.items()]
    header = bytearray(WEIGHTS_MAGIC)
    header += encode_varint(len(arrays))
    for name, array in arrays:
        header += encode_string(name)
        header += encode_shape(array.shape)
    body = b''.join(np.ascontiguousarray(array).tobytes() for _, array in arrays)
    return bytes(header) + body


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    if data[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise ManifestError('解析权重文件', '文件头标识不匹配')
    try:
        offset = len(WEIGHTS_MAGIC)
        count, offset = decode_varint(data, offset)
        table: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            name, offset = decode_string(data, offset)
            shape, offset = decode_shape(data, offset)
            table.append((name, shape))
        parameters: dict[str, np.ndarray] = {}
        for name, shape in table:
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if offset + size > len(data):
                raise ValueError(f'参数 {name} 数据被截断')
            values = np.frombuffer(data, dtype='<f4', count=size // 4, offset=offset)
            parameters[name] = values.reshape(shape).copy()
            offset += size
    except (ValueError, UnicodeDecodeError) as exc:
        raise ManifestError('解析权重文件', str(exc)) from exc
    if offset != len(data):
        raise ManifestError('解析权重文件', f'文件末尾有 {len(data) - offset} 字节多余数据')
    return parameters


def write_weights(path: str, parameters: Mapping[str, Any]) -> None:
    with open(path, 'wb') as fp:
        fp.write(encode_weights(parameters))
    logger.debug("已写入 {} 个参数到 '{}'", len(parameters), path)


def read_weights(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, 'rb') as fp:
            data = fp.read()
    except OSError as exc:
        logger.error("读取权重文件 '{}' 失败: {}", path, exc)
        raise ManifestError('读取权重文件', f"无法读取 '{path}': {exc}") from exc
    return decode_weights(data)


def _write_json(path: str, payload: Any) -> None:
    with open(path, 'w', encoding='utf-8') as fp:
        json.dump(payload, fp, ensure_ascii=False, indent=2, sort_keys=True)


def _read_json(path: str, action_name: str) -> Any:
    try:
        with open(path, encoding='utf-8') as fp:
            return json.load(fp)
    except FileNotFoundError as exc:
        raise ManifestError(action_name, f"文件 '{path}' 不存在") from exc
    except json.JSONDecodeError as exc:
        logger.error("错误: 文件 '{}' 内容不是有效的JSON格式。", path)
        raise ManifestError(action_name, f"'{path}' 不是有效的 JSON: {exc}") from exc


def save_checkpoint(
    directory: str, checkpoint: Checkpoint, log_rows: list[dict[str, Any]] | None = None
) -> None:
    """Write ``weights.bin``, ``meta.json`` and (optionally) ``log.csv`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    write_weights(os.path.join(directory, WEIGHTS_FILE), checkpoint.parameters)
    meta = dict(checkpoint.meta)
    meta.update(
        {
            'config_hash': checkpoint.config_hash,
            'registry': checkpoint.registry,
            'best_score': checkpoint.best_score,
            'epoch': checkpoint.epoch,
            'seed': checkpoint.seed,
        }
    )
    _write_json(os.path.join(directory, META_FILE), meta)
    if log_rows is not None:
        save_log(os.path.join(directory, LOG_FILE), log_rows)
    logger.info(
        "检查点已保存到 '{}' (epoch={}, best={:.6g})",
        directory,
        checkpoint.epoch,
        checkpoint.best_score,
    )


def load_checkpoint(directory: str) -> Checkpoint:
    meta = _read_json(os.path.join(directory, META_FILE), '读取检查点')
    parameters = read_weights(os.path.join(directory, WEIGHTS_FILE))
    try:
        checkpoint = Checkpoint(
            parameters=parameters,
            config_hash=str(meta.pop('config_hash')),
            registry=dict(meta.pop('registry')),
            best_score=float(meta.pop('best_score')),
            epoch=int(meta.pop('epoch')),
            seed=int(meta.pop('seed')),
            meta=meta,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError('读取检查点', f'meta.json 缺少字段: {exc}') from exc
    logger.info("已从 '{}' 加载检查点 {}", directory, checkpoint)
    return checkpoint


def save_log(path: str, rows: list[dict[str, Any]]) -> None:
    pd.DataFrame(rows).to_csv(path, index=False)


def save_report(path: str, report: MetricReport) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    _write_json(path, report.to_dict())
    logger.info("指标报告已保存到 '{}' ({} 条)", path, len(report.entries))


def load_report(path: str) -> MetricReport:
    return MetricReport.from_dict(_read_json(path, '读取指标报告'))


def save_json(path: str, payload: Any) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    _write_json(path, payload)


def load_json(path: str, action_name: str = '读取 JSON') -> Any:
    return _read_json(path, action_name)
