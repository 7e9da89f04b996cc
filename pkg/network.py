from collections.abc import Iterable
from typing import Any

import torch
from torch import nn

from backbone import Backbone, EncoderConfig
from constant import CLS, DET, REG, SEG
from exceptions import ConfigurationError, RegistrationError
from heads import (
    ClassificationHead,
    DetectionHead,
    RegressionHead,
    SegmentationHead,
    SegmentationHeadConfig,
)
from models import TaskSpec


def build_head(
    task: TaskSpec, encoder: EncoderConfig, seg_config: SegmentationHeadConfig
) -> nn.Module:
    dim = encoder.embed_dim
    if task.task_type == SEG:
        config = SegmentationHeadConfig(
            tap_layers=seg_config.tap_layers,
            fusion_dim=seg_config.fusion_dim,
            num_classes=task.num_classes or 2,
            reassemble_dims=seg_config.reassemble_dims,
        )
        return SegmentationHead(dim, encoder.image_size, config)
    if task.task_type == CLS:
        return ClassificationHead(dim, task.num_classes)
    if task.task_type == REG:
        return RegressionHead(dim)
    if task.task_type == DET:
        return DetectionHead(dim, seg_config.fusion_dim)
    raise ConfigurationError('构建任务头', f'未知任务类型: {task.task_type}')


class M2DINO(nn.Module):
    """Shared backbone plus one lightweight head per task id.

    ``state_dict`` names are ``backbone.encoder...``/``backbone.moe...``/
    ``backbone.task_embed...`` and ``head.{task_id}...``; storage strips the
    ``backbone.`` prefix to obtain the canonical checkpoint names.
    """

    def __init__(
        self,
        encoder: EncoderConfig,
        tasks: Iterable[TaskSpec],
        seg_config: SegmentationHeadConfig | None = None,
    ) -> None:
        super().__init__()
        tasks = list(tasks)
        if not tasks:
            raise ConfigurationError('构建模型', '任务列表为空')
        self.seg_config = seg_config or SegmentationHeadConfig()
        self.seg_config.validate(encoder.depth)
        self.encoder_config = encoder
        self.tasks = {task.task_id: task for task in tasks}
        self.backbone = Backbone(encoder, self.tasks)
        self.head = nn.ModuleDict(
            {task.task_id: build_head(task, encoder, self.seg_config) for task in tasks}
        )

    def task(self, task_id: str) -> TaskSpec:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise RegistrationError('模型前向', f'未注册的任务: {task_id!r}') from None

    def forward(self, images: torch.Tensor, task_id: str) -> Any:
        task = self.task(task_id)
        taps = self.seg_config.tap_layers if task.task_type == SEG else ()
        out = self.backbone.encode(images, task_id, taps=taps)
        head = self.head[task_id]
        if task.task_type == SEG:
            return head(out.hidden)
        return head(out.feature_maps)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters split by optimizer component: backbone, moe, decoder, heads."""
        groups: dict[str, list[nn.Parameter]] = {
            'backbone': list(self.backbone.encoder.parameters()),
            'moe': [],
            'decoder': [],
            'heads': [],
        }
        if self.backbone.moe is not None:
            groups['moe'].extend(self.backbone.moe.parameters())
            groups['moe'].extend(self.backbone.task_embed.parameters())
        for task_id, head in self.head.items():
            key = 'decoder' if self.tasks[task_id].task_type == SEG else 'heads'
            groups[key].extend(head.parameters())
        return groups
