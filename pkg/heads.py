import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from config import DEFAULT_FUSION_DIM, DEFAULT_REASSEMBLE_DIMS, DEFAULT_TAP_LAYERS
from exceptions import ConfigurationError, DataError, ShapeError
from models import BoundingBox

# CenterNet-style objectness prior, sigmoid(-2.19) ≈ 0.1
_HEATMAP_PRIOR_BIAS = -2.19


@dataclass(frozen=True)
class SegmentationHeadConfig:
    tap_layers: tuple[int, ...] = DEFAULT_TAP_LAYERS
    fusion_dim: int = DEFAULT_FUSION_DIM
    num_classes: int = 2
    reassemble_dims: tuple[int, ...] = DEFAULT_REASSEMBLE_DIMS

    def __post_init__(self) -> None:
        action = '分割头配置'
        taps = tuple(int(i) for i in self.tap_layers)
        if len(taps) != 4:
            raise ConfigurationError(action, f'需要 4 个抽取层，得到 {len(taps)}', 'tap_layers')
        if list(taps) != sorted(set(taps)):
            raise ConfigurationError(action, f'抽取层必须严格升序: {taps}', 'tap_layers')
        if len(self.reassemble_dims) != 4 or min(self.reassemble_dims) < 1:
            raise ConfigurationError(action, 'reassemble_dims 需要 4 个正整数', 'reassemble_dims')
        if self.fusion_dim < 1:
            raise ConfigurationError(action, 'fusion_dim 必须为正', 'fusion_dim')
        if self.num_classes < 1:
            raise ConfigurationError(action, 'num_classes 必须 >= 1', 'num_classes')
        object.__setattr__(self, 'tap_layers', taps)
        object.__setattr__(self, 'reassemble_dims', tuple(int(d) for d in self.reassemble_dims))

    def validate(self, depth: int) -> None:
        outside = [i for i in self.tap_layers if i < 1 or i > depth]
        if outside:
            raise ConfigurationError(
                '分割头配置', f'抽取层 {outside} 超出编码器深度 {depth}', 'tap_layers'
            )

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload['tap_layers'] = list(self.tap_layers)
        payload['reassemble_dims'] = list(self.reassemble_dims)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> 'SegmentationHeadConfig':
        unknown = sorted(set(payload) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigurationError('分割头配置', f'未知字段: {unknown}', unknown[0])
        values = dict(payload)
        for key in ('tap_layers', 'reassemble_dims'):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


class DetectionGrid(NamedTuple):
    """Objectness heatmap (…, h, w) and box parameters (…, 4, h, w): dx, dy, bw, bh."""

    heatmap: torch.Tensor
    box_params: torch.Tensor


class DetectionTarget(NamedTuple):
    heatmap: torch.Tensor
    cell: tuple[int, int]
    regression: torch.Tensor


class ResidualConvUnit(nn.Module):
    def __init__(self, features: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(features, features, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(features, features, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv1(F.relu(x))
        out = self.conv2(F.relu(out))
        return x + out


class FusionBlock(nn.Module):
    def __init__(self, features: int) -> None:
        super().__init__()
        self.skip_unit = ResidualConvUnit(features)
        self.unit = ResidualConvUnit(features)
        self.out_conv = nn.Conv2d(features, features, kernel_size=1)

    def forward(
        self, x: torch.Tensor, skip: torch.Tensor | None = None, out_size=None
    ) -> torch.Tensor:
        if skip is not None:
            x = x + self.skip_unit(skip)
        x = self.unit(x)
        if out_size is None:
            x = F.interpolate(x, scale_factor=2.0, mode='bilinear', align_corners=True)
        else:
            x = F.interpolate(x, size=tuple(out_size), mode='bilinear', align_corners=True)
        return self.out_conv(x)


class Reassemble(nn.Module):
    """Tokens (B, N, D) → image-like map at one of the four decoder scales."""

    def __init__(self, embed_dim: int, channels: int, fusion_dim: int, resample: nn.Module) -> None:
        super().__init__()
        self.project = nn.Conv2d(embed_dim, channels, kernel_size=1)
        self.resample = resample
        self.out_conv = nn.Conv2d(channels, fusion_dim, kernel_size=3, padding=1, bias=False)

    def forward(self, tokens: torch.Tensor, grid: int) -> torch.Tensor:
        batch, _, dim = tokens.shape
        x = tokens.transpose(1, 2).reshape(batch, dim, grid, grid)
        return self.out_conv(self.resample(self.project(x)))


class SegmentationHead(nn.Module):
    """DPT-style decoder: reassemble 4 tapped layers at ×4, ×2, ×1, ×½ and fuse coarse to fine."""

    def __init__(self, embed_dim: int, image_size: int, config: SegmentationHeadConfig) -> None:
        super().__init__()
        self.config = config
        self.image_size = image_size
        d1, d2, d3, d4 = config.reassemble_dims
        fusion = config.fusion_dim
        self.reassemble = nn.ModuleList(
            [
                Reassemble(embed_dim, d1, fusion, nn.ConvTranspose2d(d1, d1, 4, stride=4)),
                Reassemble(embed_dim, d2, fusion, nn.ConvTranspose2d(d2, d2, 2, stride=2)),
                Reassemble(embed_dim, d3, fusion, nn.Identity()),
                Reassemble(embed_dim, d4, fusion, nn.Conv2d(d4, d4, 3, stride=2, padding=1)),
            ]
        )
        self.fusion = nn.ModuleList(FusionBlock(fusion) for _ in range(4))
        self.output = nn.Sequential(
            nn.Conv2d(fusion, fusion // 2 or 1, kernel_size=3, padding=1),
            nn.Upsample(size=(image_size, image_size), mode='bilinear', align_corners=True),
            nn.Conv2d(fusion // 2 or 1, 32, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, config.num_classes, kernel_size=1),
        )

    def forward(self, hidden: Mapping[int, torch.Tensor]) -> torch.Tensor:
        missing = [i for i in self.config.tap_layers if i not in hidden]
        if missing:
            raise ConfigurationError('分割解码', f'缺少抽取层特征: {missing}', 'tap_layers')
        unbatched = hidden[self.config.tap_layers[0]].dim() == 2
        taps = [hidden[i] for i in self.config.tap_layers]
        if unbatched:
            taps = [t.unsqueeze(0) for t in taps]
        grid = math.isqrt(taps[0].shape[1])
        if grid * grid != taps[0].shape[1]:
            raise ShapeError('分割解码', f'token 数 {taps[0].shape[1]} 不是完全平方数')

        a1, a2, a3, a4 = (block(t, grid) for block, t in zip(self.reassemble, taps, strict=True))
        f4 = self.fusion[3](a4, out_size=a3.shape[-2:])
        f3 = self.fusion[2](f4, a3, out_size=a2.shape[-2:])
        f2 = self.fusion[1](f3, a2, out_size=a1.shape[-2:])
        f1 = self.fusion[0](f2, a1)
        logits = self.output(f1)
        return logits[0] if unbatched else logits


class ClassificationHead(nn.Module):
    def __init__(self, embed_dim: int, num_classes: int) -> None:
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError('分类头配置', 'num_classes 必须 >= 2', 'num_classes')
        self.fc = nn.Linear(embed_dim, num_classes)

    def forward(self, feature_maps: torch.Tensor) -> torch.Tensor:
        return self.fc(feature_maps.mean(dim=(-2, -1)))


class RegressionHead(nn.Module):
    """Global pooling + FC to one scalar in resized-pixel units."""

    def __init__(self, embed_dim: int) -> None:
        super().__init__()
        self.fc = nn.Linear(embed_dim, 1)

    def forward(self, feature_maps: torch.Tensor) -> torch.Tensor:
        return self.fc(feature_maps.mean(dim=(-2, -1))).squeeze(-1)

    def warm_start(self, mean_target: float) -> None:
        with torch.no_grad():
            self.fc.bias.fill_(float(mean_target))


class DetectionHead(nn.Module):
    def __init__(self, embed_dim: int, hidden_dim: int = DEFAULT_FUSION_DIM) -> None:
        super().__init__()
        self.conv = nn.Conv2d(embed_dim, hidden_dim, kernel_size=3, padding=1)
        self.heatmap = nn.Conv2d(hidden_dim, 1, kernel_size=1)
        self.box = nn.Conv2d(hidden_dim, 4, kernel_size=1)
        nn.init.constant_(self.heatmap.bias, _HEATMAP_PRIOR_BIAS)

    def forward(self, feature_maps: torch.Tensor) -> DetectionGrid:
        unbatched = feature_maps.dim() == 3
        x = feature_maps.unsqueeze(0) if unbatched else feature_maps
        x = F.relu(self.conv(x))
        heatmap = torch.sigmoid(self.heatmap(x)).squeeze(1)
        box_params = torch.sigmoid(self.box(x))
        if unbatched:
            return DetectionGrid(heatmap[0], box_params[0])
        return DetectionGrid(heatmap, box_params)


def splat_radius(box: BoundingBox, h: int, w: int) -> int:
    return max(1, int(math.floor(min(box.bw * w, box.bh * h) / 3.0 + 0.5)))


def detect_encode(
    box: BoundingBox, h: int, w: int, dtype: torch.dtype = torch.float32
) -> DetectionTarget:
    """Center-cell targets for one box on an h×w grid.

    The heatmap is a Gaussian splat peaking at exactly 1 on the center cell; the
    regression target ``(dx, dy, bw, bh)`` is supervised at that cell only.
    """
    if box.bw <= 0 or box.bh <= 0:
        raise DataError('编码检测目标', f'退化的边界框: {tuple(box)}', 'box')
    row = min(max(int(math.floor(box.cy * h)), 0), h - 1)
    col = min(max(int(math.floor(box.cx * w)), 0), w - 1)
    dx = box.cx * w - col
    dy = box.cy * h - row

    radius = splat_radius(box, h, w)
    sigma = (2 * radius + 1) / 6.0
    ys, xs = np.ogrid[:h, :w]
    dist2 = (xs - col) ** 2 + (ys - row) ** 2
    splat = np.exp(-dist2 / (2.0 * sigma * sigma))
    splat[(np.abs(xs - col) > radius) | (np.abs(ys - row) > radius)] = 0.0
    splat[row, col] = 1.0

    heatmap = torch.as_tensor(splat, dtype=dtype)
    regression = torch.tensor([dx, dy, box.bw, box.bh], dtype=dtype)
    return DetectionTarget(heatmap, (row, col), regression)


def detect_decode(grid: DetectionGrid) -> BoundingBox:
    """Single-box decode: peak cell of the heatmap, first row-major index on ties."""
    heatmap = grid.heatmap.detach().cpu().numpy()
    if heatmap.ndim != 2:
        raise ShapeError('解码检测结果', f'期望单张 h×w 热图，得到 {heatmap.shape}')
    h, w = heatmap.shape
    flat = int(np.argmax(heatmap))
    row, col = divmod(flat, w)
    dx, dy, bw, bh = (float(v) for v in grid.box_params[:, row, col].detach().cpu().tolist())
    box = BoundingBox(
        cx=(col + dx) / w,
        cy=(row + dy) / h,
        bw=bw,
        bh=bh,
        score=float(heatmap[row, col]),
    )
    return box.clamped()


def detect_decode_batch(grid: DetectionGrid) -> list[BoundingBox]:
    return [
        detect_decode(DetectionGrid(grid.heatmap[i], grid.box_params[i]))
        for i in range(grid.heatmap.shape[0])
    ]
