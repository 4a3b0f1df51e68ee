"""The tri-decoder network: shared encoder, bottleneck, three decoders.

The encoder is a stack of windowed-attention stages with patch merging; the
three decoders mirror it with patch expanding and skip connections
(concatenate, then a learned linear reduction).  With attention sharing
enabled, the decoder blocks at matching (stage, block) positions reference
one SharedAttentionGroup, so a configured fraction of their attention heads
is a single set of weights driven by all three branches.

Public tensors are channels-last: images (B, H, W, C) in [0, 1], logits
(B, H, W, 2) per branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .blocks import (
    FinalExpansion,
    PatchEmbed,
    PatchExpand,
    PatchMerge,
    SharedAttentionGroup,
    TokenMlpBottleneck,
    WindowBlock,
    effective_window,
    init_projection,
)
from .config import N_DECODERS, SWIN_BOTTLENECK_DEPTH, Bottleneck, ModelConfig

BRANCH_NAMES = ("nuclei", "edge", "cluster")


@dataclass
class FeatureMap:
    """Activations between blocks: (token-rows, token-cols, channels)."""

    values: torch.Tensor
    stage_index: int


@dataclass
class TriPrediction:
    """Per-branch logit maps at input resolution, channels last (..., 2)."""

    nuclei_logits: torch.Tensor
    edge_logits: torch.Tensor
    cluster_logits: torch.Tensor

    def branches(self) -> dict:
        return {
            "nuclei": self.nuclei_logits,
            "edge": self.edge_logits,
            "cluster": self.cluster_logits,
        }

    def foreground_probabilities(self) -> dict:
        return {
            name: torch.softmax(logits, dim=-1)[..., 1]
            for name, logits in self.branches().items()
        }

    def binary_masks(self) -> dict:
        """Argmax masks per branch as numpy bool arrays."""
        return {
            name: logits.detach().argmax(dim=-1).cpu().numpy().astype(bool)
            for name, logits in self.branches().items()
        }


class SwinBottleneck(nn.Module):
    """Two windowed-attention blocks at the deepest resolution."""

    def __init__(self, dim: int, heads: int, side: int, window_size: int):
        super().__init__()
        window = effective_window(side, window_size)
        self.blocks = nn.ModuleList()
        for b in range(SWIN_BOTTLENECK_DEPTH):
            attn = SharedAttentionGroup(dim, heads, 0, window, n_users=1)
            self.blocks.append(
                WindowBlock(dim, side, attn, user_id=0, shifted=(b % 2 == 1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Decoder(nn.Module):
    """One output branch: expand, fuse skip, attend, per-pixel projection.

    ``attn_groups`` holds, per stage and block position, the trio-shared
    attention group this decoder participates in; when None, the decoder
    owns all attention weights privately.
    """

    def __init__(self, config: ModelConfig,
                 attn_groups: list | None, decoder_id: int):
        super().__init__()
        self.config = config
        self.decoder_id = decoder_id
        self.expands = nn.ModuleList()
        self.reducers = nn.ModuleList()
        self.stage_blocks = nn.ModuleList()
        for k in range(config.n_stages):
            dim = config.stage_dim(k)
            side = config.stage_side(k)
            window = effective_window(side, config.window_size)
            self.expands.append(PatchExpand(config.stage_dim(k + 1)))
            reducer = nn.Linear(2 * dim, dim)
            init_projection(reducer)
            self.reducers.append(reducer)
            blocks = nn.ModuleList()
            for b in range(config.decoder_depths[k]):
                if attn_groups is not None:
                    group = attn_groups[k][b]
                    user = decoder_id
                else:
                    group = SharedAttentionGroup(
                        dim, config.heads_per_stage[k], 0, window, n_users=1)
                    user = 0
                blocks.append(WindowBlock(dim, side, group, user_id=user,
                                          shifted=(b % 2 == 1)))
            self.stage_blocks.append(blocks)
        self.final_expand = FinalExpansion(config.embed_dim, config.patch_size)
        self.head = nn.Linear(self.final_expand.out_dim,
                              config.num_classes_per_branch)
        init_projection(self.head)

    def forward(self, z: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        x = z
        for k in reversed(range(self.config.n_stages)):
            x = self.expands[k](x)
            x = torch.cat([x, skips[k]], dim=-1)
            x = self.reducers[k](x)
            for blk in self.stage_blocks[k]:
                x = blk(x)
        x = self.final_expand(x)
        return self.head(x)


class TriDecoderNet(nn.Module):
    """Shared encoder, bottleneck per config, three weight-linked decoders."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config

        self.patch_embed = PatchEmbed(
            config.in_channels, config.embed_dim, config.patch_size)
        self.encoder_stages = nn.ModuleList()
        self.mergers = nn.ModuleList()
        for k in range(config.n_stages):
            dim = config.stage_dim(k)
            side = config.stage_side(k)
            window = effective_window(side, config.window_size)
            stage = nn.ModuleList()
            for b in range(config.encoder_depths[k]):
                attn = SharedAttentionGroup(
                    dim, config.heads_per_stage[k], 0, window, n_users=1)
                stage.append(WindowBlock(dim, side, attn, user_id=0,
                                         shifted=(b % 2 == 1)))
            self.encoder_stages.append(stage)
            self.mergers.append(PatchMerge(dim))

        if config.bottleneck is Bottleneck.TOKEN_MLP:
            self.bottleneck = TokenMlpBottleneck(config.bottleneck_dim)
        else:
            self.bottleneck = SwinBottleneck(
                config.bottleneck_dim, config.bottleneck_heads,
                config.bottleneck_side(), config.window_size)

        if config.attention_sharing:
            self.trio_groups = nn.ModuleList()
            for k in range(config.n_stages):
                dim = config.stage_dim(k)
                window = effective_window(
                    config.stage_side(k), config.window_size)
                stage_groups = nn.ModuleList(
                    SharedAttentionGroup(
                        dim, config.heads_per_stage[k],
                        config.shared_heads(k), window, n_users=N_DECODERS)
                    for _ in range(config.decoder_depths[k])
                )
                self.trio_groups.append(stage_groups)
            groups = list(self.trio_groups)
        else:
            self.trio_groups = None
            groups = None

        self.decoders = nn.ModuleList(
            Decoder(config, groups, d) for d in range(N_DECODERS))

    # -- forward --------------------------------------------------------------

    def _prepare_images(self, images) -> torch.Tensor:
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(np.ascontiguousarray(images))
        if images.ndim == 3:
            images = images.unsqueeze(0)
        if images.ndim != 4:
            raise ValueError(
                f"expected images of shape (B, H, W, C), got {tuple(images.shape)}")
        b, h, w, c = images.shape
        size = self.config.input_size
        if h != size or w != size:
            raise ValueError(
                f"expected {size}x{size} inputs, got {h}x{w}")
        if c != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} channels, got {c}")
        param = next(self.parameters())
        return images.to(device=param.device, dtype=param.dtype)

    def forward(self, images) -> TriPrediction:
        x = self._prepare_images(images)
        x = self.patch_embed(x)
        skips = []
        for stage, merger in zip(self.encoder_stages, self.mergers):
            for blk in stage:
                x = blk(x)
            skips.append(x)
            x = merger(x)
        z = self.bottleneck(x)
        outs = [dec(z, skips) for dec in self.decoders]
        return TriPrediction(*outs)

    def predict(self, images) -> TriPrediction:
        """Inference-mode forward (no grad, eval semantics)."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return self.forward(images)
        finally:
            self.train(was_training)

    # -- introspection ---------------------------------------------------------

    def decoder_block(self, stage: int, index: int, decoder_id: int) -> WindowBlock:
        return self.decoders[decoder_id].stage_blocks[stage][index]

    def shared_attention_groups(self) -> list[SharedAttentionGroup]:
        """Groups referenced by all three decoders (empty when sharing is off)."""
        if self.trio_groups is None:
            return []
        return [g for stage in self.trio_groups for g in stage]


def build_model(config: ModelConfig, seed: int | None = None,
                dtype: torch.dtype | None = None) -> TriDecoderNet:
    """Construct the network; with ``seed`` the initialization is reproducible
    (seeds torch's global generator).  ``dtype`` casts the whole model, e.g.
    torch.float64 for finite-difference checks."""
    config.validate()
    if seed is not None:
        torch.manual_seed(seed)
    model = TriDecoderNet(config)
    if dtype is not None:
        model = model.to(dtype)
    return model
