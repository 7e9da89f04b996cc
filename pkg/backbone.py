"""ViT encoder with task-conditioned Mixture-of-Experts feed-forward sublayers.

Parameter names follow the checkpoint convention
``encoder.layer.{i}.{sublayer}.{param}``, ``moe.layer.{i}.expert.{j}.{param}`` and
``task_embed.{task_id}``; layer indices are 1-based.
"""

from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from config import (
    DEFAULT_DEPTH,
    DEFAULT_EMBED_DIM,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_MLP_RATIO,
    DEFAULT_MOE_LAYERS,
    DEFAULT_NUM_EXPERTS,
    DEFAULT_NUM_HEADS,
    DEFAULT_PATCH_SIZE,
    DEFAULT_TASK_EMBED_DIM,
    TASK_EMBED_INIT_STD,
)
from exceptions import ConfigurationError, RegistrationError, ShapeError
from utils import ensure_finite


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = DEFAULT_IMAGE_SIZE
    patch_size: int = DEFAULT_PATCH_SIZE
    embed_dim: int = DEFAULT_EMBED_DIM
    depth: int = DEFAULT_DEPTH
    num_heads: int = DEFAULT_NUM_HEADS
    mlp_ratio: float = DEFAULT_MLP_RATIO
    moe_layers: tuple[int, ...] = field(default=DEFAULT_MOE_LAYERS)
    num_experts: int = DEFAULT_NUM_EXPERTS
    task_embed_dim: int = DEFAULT_TASK_EMBED_DIM
    moe_enabled: bool = True

    def __post_init__(self) -> None:
        action = '编码器配置'
        if self.patch_size <= 0 or self.image_size <= 0:
            raise ConfigurationError(action, 'image_size 与 patch_size 必须为正', 'image_size')
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                action,
                f'image_size {self.image_size} 不能被 patch_size {self.patch_size} 整除',
                'image_size',
            )
        if self.depth < 1:
            raise ConfigurationError(action, 'depth 必须 >= 1', 'depth')
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigurationError(
                action, f'embed_dim {self.embed_dim} 不能被 num_heads {self.num_heads} 整除',
                'num_heads',
            )
        if self.num_experts < 1:
            raise ConfigurationError(action, 'num_experts 必须 >= 1', 'num_experts')
        if self.task_embed_dim < 1:
            raise ConfigurationError(action, 'task_embed_dim 必须 >= 1', 'task_embed_dim')
        layers = tuple(sorted(set(int(i) for i in self.moe_layers)))
        if any(i < 1 or i > self.depth for i in layers):
            raise ConfigurationError(
                action, f'moe_layers {layers} 超出 1..{self.depth}', 'moe_layers'
            )
        object.__setattr__(self, 'moe_layers', layers)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def with_moe(self, enabled: bool) -> 'EncoderConfig':
        payload = self.to_dict()
        payload['moe_enabled'] = enabled
        return EncoderConfig.from_dict(payload)

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload['moe_layers'] = list(self.moe_layers)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> 'EncoderConfig':
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigurationError('编码器配置', f'未知字段: {unknown}', unknown[0])
        values = dict(payload)
        if 'moe_layers' in values:
            values['moe_layers'] = tuple(values['moe_layers'])
        return cls(**values)


class BackboneOutput(NamedTuple):
    """Token embeddings Z (N×D), feature maps F (D×h×w) and normed tapped-layer tokens."""

    tokens: torch.Tensor
    feature_maps: torch.Tensor
    hidden: dict[int, torch.Tensor]


def gate(h: torch.Tensor, e_t: torch.Tensor, w_g: torch.Tensor) -> torch.Tensor:
    """Dense task-conditioned routing: ``softmax(W_g [h; e_t])`` per token.

    ``h`` is (..., D); ``e_t`` is a single (E,) vector broadcast over every token, or
    (B, E) broadcast over the token axis of a (B, N, D) input. Returns (..., K) weights on
    the K-simplex.
    """
    if e_t.dim() == 1:
        e_b = e_t.expand(*h.shape[:-1], e_t.shape[-1])
    elif e_t.dim() == 2 and h.dim() == 3 and e_t.shape[0] == h.shape[0]:
        e_b = e_t.unsqueeze(1).expand(h.shape[0], h.shape[1], e_t.shape[-1])
    else:
        raise ShapeError('计算门控', f'任务嵌入形状 {tuple(e_t.shape)} 无法广播到 {tuple(h.shape)}')
    if w_g.dim() != 2 or w_g.shape[1] != h.shape[-1] + e_t.shape[-1]:
        raise ShapeError(
            '计算门控',
            f'W_g 形状 {tuple(w_g.shape)} 与 D+E={h.shape[-1] + e_t.shape[-1]} 不符',
        )
    logits = torch.cat([h, e_b], dim=-1) @ w_g.t()
    return F.softmax(logits, dim=-1)


class FeedForward(nn.Module):
    """Two-layer D → hidden → D map with GELU; the dense sublayer and each expert."""

    def __init__(self, dim: int, hidden_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        q, k, v = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class EncoderLayer(nn.Module):
    """Pre-norm transformer layer. ``mlp`` is None where an MoE block supplies the FFN."""

    def __init__(self, dim: int, num_heads: int, hidden_dim: int, dense_ffn: bool = True) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = FeedForward(dim, hidden_dim) if dense_ffn else None

    def forward(self, x: torch.Tensor, ffn=None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        sublayer = self.mlp if self.mlp is not None else ffn
        if sublayer is None:
            raise ConfigurationError('编码器前向', '该层缺少前馈子层')
        return x + sublayer(self.norm2(x))


class MoEBlock(nn.Module):
    """K feed-forward experts mixed by the task-conditioned gate ``W_g``."""

    def __init__(
        self, dim: int, hidden_dim: int, num_experts: int, task_embed_dim: int, layer_index: int
    ) -> None:
        super().__init__()
        self.layer_index = layer_index
        self.gate = nn.Linear(dim + task_embed_dim, num_experts, bias=False)
        self.expert = nn.ModuleList(FeedForward(dim, hidden_dim) for _ in range(num_experts))
        self.last_gates: torch.Tensor | None = None

    @property
    def num_experts(self) -> int:
        return len(self.expert)

    def forward(
        self, h: torch.Tensor, e_t: torch.Tensor, weights: torch.Tensor | None = None
    ) -> torch.Tensor:
        # weights overrides the learned routing (inspection / one-hot probes)
        if weights is None:
            weights = gate(h, e_t, self.gate.weight)
        elif weights.shape[-1] != self.num_experts:
            raise ShapeError('MoE 前向', f'覆盖权重维度 {weights.shape[-1]} != K={self.num_experts}')
        self.last_gates = weights.detach()
        expert_out = torch.stack([expert(h) for expert in self.expert], dim=-2)
        return (weights.unsqueeze(-1) * expert_out).sum(dim=-2)


class MoEStack(nn.Module):
    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.layer = nn.ModuleDict(
            {
                str(index): MoEBlock(
                    config.embed_dim,
                    config.hidden_dim,
                    config.num_experts,
                    config.task_embed_dim,
                    index,
                )
                for index in config.moe_layers
            }
        )

    def block(self, index: int) -> MoEBlock | None:
        key = str(index)
        return self.layer[key] if key in self.layer else None


class TaskEmbedding(nn.ParameterDict):
    """One learnable row e_t per registered task id."""

    def __init__(self, task_ids: Iterable[str], dim: int, std: float = TASK_EMBED_INIT_STD) -> None:
        super().__init__()
        self._embed_dim = dim
        self._init_std = std
        for task_id in sorted(task_ids):
            self.register(task_id)

    def register(self, task_id: str) -> None:
        if task_id in self:
            raise RegistrationError('注册任务嵌入', f"任务 '{task_id}' 已注册")
        self[task_id] = nn.Parameter(torch.randn(self._embed_dim) * self._init_std)

    def lookup(self, task_id: Any) -> torch.Tensor:
        if not isinstance(task_id, str) or task_id not in self:
            raise RegistrationError('查询任务嵌入', f'未注册的任务: {task_id!r}')
        return self[task_id]


class ViTEncoder(nn.Module):
    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        dim = config.embed_dim
        moe_layers = set(config.moe_layers) if config.moe_enabled else set()
        patch = config.patch_size
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + config.grid_size**2, dim))
        self.layer = nn.ModuleDict(
            {
                str(index): EncoderLayer(
                    dim, config.num_heads, config.hidden_dim, dense_ffn=index not in moe_layers
                )
                for index in range(1, config.depth + 1)
            }
        )
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed


class Backbone(nn.Module):
    """f_θ: image → (Z, F). MoE parameters exist only when ``moe_enabled``."""

    def __init__(self, config: EncoderConfig, task_ids: Iterable[str] = ()) -> None:
        super().__init__()
        self.config = config
        self.encoder = ViTEncoder(config)
        if config.moe_enabled:
            self.moe: MoEStack | None = MoEStack(config)
            self.task_embed: TaskEmbedding | None = TaskEmbedding(task_ids, config.task_embed_dim)
        else:
            self.moe = None
            self.task_embed = None

    @property
    def num_moe_blocks(self) -> int:
        return 0 if self.moe is None else len(self.moe.layer)

    def task_embedding(self, task_id: Any) -> torch.Tensor:
        if self.task_embed is None:
            raise RegistrationError('查询任务嵌入', '编码器未启用 MoE，无任务嵌入')
        return self.task_embed.lookup(task_id)

    def moe_forward(
        self,
        h: torch.Tensor,
        task_id: str,
        layer_index: int | None = None,
        weights: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Apply one MoE block (first MoE layer by default) to tokens ``h`` (..., D)."""
        if self.moe is None:
            raise ConfigurationError('MoE 前向', '编码器未启用 MoE')
        e_t = self.task_embedding(task_id)
        index = layer_index if layer_index is not None else self.config.moe_layers[0]
        block = self.moe.block(index)
        if block is None:
            raise ConfigurationError('MoE 前向', f'第 {index} 层不是 MoE 层', 'layer_index')
        ensure_finite(h, 'MoE 前向')
        return block(h, e_t, weights)

    def encode(
        self, images: torch.Tensor, task_id: str | None = None, taps: Iterable[int] = ()
    ) -> BackboneOutput:
        """Run the encoder on (B, 3, S, S) or (3, S, S) images.

        ``taps`` selects layers whose final-normed patch tokens are returned in
        ``hidden`` for dense decoders. Without MoE, ``task_id`` is ignored.
        """
        cfg = self.config
        unbatched = images.dim() == 3
        if unbatched:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError('编码图像', f'期望 (B, 3, H, W)，得到 {tuple(images.shape)}')
        if images.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ShapeError(
                '编码图像',
                f'空间尺寸 {tuple(images.shape[-2:])} != {cfg.image_size}x{cfg.image_size}',
            )
        ensure_finite(images, '编码图像')
        e_t = self.task_embedding(task_id) if self.moe is not None else None

        tap_set = set(taps)
        hidden: dict[int, torch.Tensor] = {}
        x = self.encoder.embed(images)
        for index in range(1, cfg.depth + 1):
            block = self.moe.block(index) if self.moe is not None else None
            ffn = partial(block, e_t=e_t) if block is not None else None
            x = self.encoder.layer[str(index)](x, ffn)
            if index in tap_set:
                hidden[index] = self.encoder.norm(x)[:, 1:]

        x = self.encoder.norm(x)
        tokens = x[:, 1:]
        batch, _, dim = tokens.shape
        feature_maps = tokens.transpose(1, 2).reshape(batch, dim, cfg.grid_size, cfg.grid_size)
        ensure_finite(feature_maps, '编码图像')

        if unbatched:
            tokens = tokens[0]
            feature_maps = feature_maps[0]
            hidden = {k: v[0] for k, v in hidden.items()}
        return BackboneOutput(tokens, feature_maps, hidden)

    def forward(self, images: torch.Tensor, task_id: str | None = None) -> BackboneOutput:
        return self.encode(images, task_id)

    def load_pretrained(self, weights: Mapping[str, Any]) -> int:
        """Load a canonical named-parameter map into the encoder.

        Feed-forward weights of layers replaced by MoE blocks are copied into every
        expert of that block. Returns the number of tensors written.
        """
        own = self.state_dict()
        written = 0
        skipped: list[str] = []
        with torch.no_grad():
            for name, value in weights.items():
                tensor = torch.as_tensor(np.asarray(value))
                targets = [name] if name in own else self._expert_targets(name)
                if not targets:
                    skipped.append(name)
                    continue
                for target in targets:
                    if tuple(own[target].shape) != tuple(tensor.shape):
                        raise ShapeError(
                            '加载预训练权重',
                            f'{name}: 形状 {tuple(tensor.shape)} != {tuple(own[target].shape)}',
                        )
                    own[target].copy_(tensor.to(own[target].dtype))
                    written += 1
        if skipped:
            logger.warning('预训练权重中有 {} 个参数未被使用，例如 {}', len(skipped), skipped[:3])
        logger.info('已加载 {} 个预训练参数张量', written)
        return written

    def _expert_targets(self, name: str) -> list[str]:
        parts = name.split('.')
        if self.moe is None or len(parts) < 5 or parts[:2] != ['encoder', 'layer']:
            return []
        if parts[3] != 'mlp' or self.moe.block(int(parts[2])) is None:
            return []
        rest = '.'.join(parts[4:])
        return [
            f'moe.layer.{parts[2]}.expert.{j}.{rest}' for j in range(self.config.num_experts)
        ]

    @torch.no_grad()
    def routing_profile(self, images: torch.Tensor, task_id: str) -> dict[int, torch.Tensor]:
        """Mean gating distribution (K,) per MoE layer for ``task_id`` on ``images``."""
        if self.moe is None:
            raise ConfigurationError('路由统计', '编码器未启用 MoE')
        self.encode(images, task_id)
        profile: dict[int, torch.Tensor] = {}
        for key, block in self.moe.layer.items():
            gates = block.last_gates
            profile[int(key)] = gates.reshape(-1, gates.shape[-1]).mean(dim=0)
        return profile

    def routing_divergence(
        self, images: torch.Tensor, task_a: str, task_b: str
    ) -> dict[int, float]:
        """Total-variation distance between two tasks' mean routing, per MoE layer."""
        first = self.routing_profile(images, task_a)
        second = self.routing_profile(images, task_b)
        return {
            index: float(0.5 * (first[index] - second[index]).abs().sum())
            for index in sorted(first)
        }
