"""Building blocks: windowed attention with partially shared heads, Swin-style
blocks with shifted windows, patch embedding / merging / expanding, and the
axial-shift token MLP bottleneck.

All blocks operate on channels-last feature maps (B, H, W, C).  Window
attention pads the map to a multiple of the window on the fly; padded tokens
are masked out of every real token's attention and the output is cropped
back, so feature-map shapes are preserved exactly.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TOKEN_SHIFT_GROUPS

MASK_FILL = -100.0


def effective_window(side: int, window_size: int) -> int:
    """Window used at a given feature-map side: the configured size when the
    map is at least that big, otherwise 4 (clamped to the side itself)."""
    if side >= window_size:
        return window_size
    return min(4, side)


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, window*window, C); H and W must divide."""
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition back to (B, H, W, C)."""
    c = windows.shape[-1]
    b = windows.shape[0] // (h * w // window // window)
    x = windows.view(b, h // window, w // window, window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def relative_position_index(window: int) -> torch.Tensor:
    """(N, N) lookup into a (2w-1)^2 bias table for every token pair."""
    coords = torch.stack(torch.meshgrid(
        torch.arange(window), torch.arange(window), indexing="ij"))
    flat = coords.flatten(1)                        # 2, N
    rel = flat[:, :, None] - flat[:, None, :]       # 2, N, N
    rel = rel.permute(1, 2, 0).contiguous()
    rel[:, :, 0] += window - 1
    rel[:, :, 1] += window - 1
    rel[:, :, 0] *= 2 * window - 1
    return rel.sum(-1)


def build_attention_mask(side: int, window: int, shift: int) -> torch.Tensor | None:
    """Additive (nW, N, N) mask handling both cyclic shift and padding.

    Tokens may attend each other only within the same region: the usual
    shifted-window regions, with padded positions pushed into regions of
    their own so no real token ever attends padding.  Returns None when the
    map tiles exactly and no shift is applied.
    """
    pad = (window - side % window) % window
    if pad == 0 and shift == 0:
        return None
    hp = side + pad
    # The shift-region pattern lives in post-roll coordinates; the padding
    # mask is built pre-roll and rolled along with the feature map.
    region = torch.zeros((hp, hp), dtype=torch.float32)
    if shift > 0:
        slices = (slice(0, hp - window), slice(hp - window, hp - shift),
                  slice(hp - shift, hp))
        tag = 0
        for hs in slices:
            for ws in slices:
                region[hs, ws] = tag
                tag += 1
    if pad > 0:
        padded = torch.ones((hp, hp), dtype=torch.bool)
        padded[:side, :side] = False
        if shift > 0:
            padded = torch.roll(padded, shifts=(-shift, -shift), dims=(0, 1))
        region = region + padded.float() * 100.0
    windows = window_partition(region.unsqueeze(0).unsqueeze(-1), window)
    windows = windows.squeeze(-1)                   # nW, N
    diff = windows.unsqueeze(1) - windows.unsqueeze(2)
    return torch.where(diff == 0, 0.0, MASK_FILL)


def init_projection(module: nn.Module) -> None:
    """Truncated-normal weights (sigma 0.02), zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SharedAttentionGroup(nn.Module):
    """Window attention parameters for one (stage, block) position.

    The first ``shared_heads`` heads (query/key/value projections and their
    relative-position bias) exist once and are referenced by every user;
    the remaining heads, and the output projection, are owned per user.
    ``n_users`` is 3 for the decoder trio and 1 for a plain private block.
    """

    def __init__(self, dim: int, heads: int, shared_heads: int, window: int,
                 n_users: int = 1, qkv_bias: bool = True):
        super().__init__()
        if not 0 <= shared_heads <= heads:
            raise ValueError(f"shared_heads {shared_heads} outside 0..{heads}")
        if dim % heads != 0:
            raise ValueError(f"heads {heads} must divide dim {dim}")
        self.dim = dim
        self.heads = heads
        self.shared_heads = shared_heads
        self.private_heads = heads - shared_heads
        self.head_dim = dim // heads
        self.window = window
        self.n_users = n_users
        self.scale = self.head_dim ** -0.5

        table_size = (2 * window - 1) ** 2
        if self.shared_heads > 0:
            self.shared_qkv = nn.Linear(
                dim, 3 * self.shared_heads * self.head_dim, bias=qkv_bias)
            self.shared_bias_table = nn.Parameter(
                torch.empty(table_size, self.shared_heads))
            nn.init.trunc_normal_(self.shared_bias_table, std=0.02)
        else:
            self.shared_qkv = None
            self.shared_bias_table = None
        if self.private_heads > 0:
            self.private_qkv = nn.ModuleList([
                nn.Linear(dim, 3 * self.private_heads * self.head_dim,
                          bias=qkv_bias)
                for _ in range(n_users)
            ])
            self.private_bias_tables = nn.ParameterList([
                nn.Parameter(torch.empty(table_size, self.private_heads))
                for _ in range(n_users)
            ])
            for table in self.private_bias_tables:
                nn.init.trunc_normal_(table, std=0.02)
        else:
            self.private_qkv = None
            self.private_bias_tables = None
        self.out_proj = nn.ModuleList(
            [nn.Linear(dim, dim) for _ in range(n_users)])

        self.register_buffer(
            "rel_index", relative_position_index(window), persistent=False)
        for proj in [self.shared_qkv, *(self.private_qkv or []), *self.out_proj]:
            if proj is not None:
                init_projection(proj)

    def shared_parameters(self):
        if self.shared_qkv is not None:
            yield from self.shared_qkv.parameters()
            yield self.shared_bias_table

    def _split_heads(self, x: torch.Tensor, proj: nn.Linear, n_heads: int):
        bw, n, _ = x.shape
        qkv = proj(x).reshape(bw, n, 3, n_heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)            # 3, B_, h, N, Dh
        return qkv[0], qkv[1], qkv[2]

    def forward(self, windows: torch.Tensor, user_id: int,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """Attention over (B_, N, C) windows using user_id's private weights."""
        if windows.shape[-1] != self.dim:
            raise ValueError(
                f"expected {self.dim} channels, got {windows.shape[-1]}")
        if not 0 <= user_id < self.n_users:
            raise ValueError(f"user_id {user_id} outside 0..{self.n_users - 1}")
        bw, n, _ = windows.shape
        qs, ks, vs = [], [], []
        biases = []
        if self.shared_heads > 0:
            q, k, v = self._split_heads(windows, self.shared_qkv,
                                        self.shared_heads)
            qs.append(q); ks.append(k); vs.append(v)
            biases.append(self.shared_bias_table)
        if self.private_heads > 0:
            q, k, v = self._split_heads(windows, self.private_qkv[user_id],
                                        self.private_heads)
            qs.append(q); ks.append(k); vs.append(v)
            biases.append(self.private_bias_tables[user_id])
        q = torch.cat(qs, dim=1)
        k = torch.cat(ks, dim=1)
        v = torch.cat(vs, dim=1)

        attn = (q * self.scale) @ k.transpose(-2, -1)   # B_, h, N, N
        bias_table = torch.cat(biases, dim=-1)          # table, h
        bias = bias_table[self.rel_index.reshape(-1)]
        bias = bias.reshape(n, n, self.heads).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) \
                + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(bw, self.heads, n, n)
        attn = torch.softmax(attn, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, self.dim)
        return self.out_proj[user_id](out)


class WindowBlock(nn.Module):
    """Pre-norm Swin block bound to one user of an attention group.

    norm -> (shift, pad, window attention, crop, unshift) -> residual ->
    norm -> feed-forward (4x GELU MLP) -> residual.  The attention mask for
    this block's static feature-map side is precomputed.
    """

    def __init__(self, dim: int, side: int, attn: SharedAttentionGroup,
                 user_id: int = 0, shifted: bool = False, mlp_ratio: int = 4):
        super().__init__()
        self.dim = dim
        self.side = side
        self.window = attn.window
        self.shift = self.window // 2 if (shifted and side > self.window) else 0
        self.user_id = user_id
        self.attn = attn
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )
        init_projection(self.mlp)
        mask = build_attention_mask(side, self.window, self.shift)
        if mask is None:
            self.attn_mask = None
        else:
            self.register_buffer("attn_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.ndim == 3
        if single:
            x = x.unsqueeze(0)
        b, h, w, c = x.shape
        if h != self.side or w != self.side or c != self.dim:
            raise ValueError(
                f"expected (B, {self.side}, {self.side}, {self.dim}), "
                f"got {tuple(x.shape)}")
        shortcut = x
        x = self.norm1(x)
        pad = (self.window - h % self.window) % self.window
        if pad:
            x = F.pad(x, (0, 0, 0, pad, 0, pad))
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        hp = h + pad
        windows = window_partition(x, self.window)
        windows = self.attn(windows, self.user_id, self.attn_mask)
        x = window_reverse(windows, self.window, hp, hp)
        if self.shift:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        if pad:
            x = x[:, :h, :w, :]
        x = shortcut + x
        x = x + self.mlp(self.norm2(x))
        return x.squeeze(0) if single else x


class PatchEmbed(nn.Module):
    """Non-overlapping patch embedding: (B, H, W, C_in) -> (B, H/p, W/p, E)."""

    def __init__(self, in_channels: int, embed_dim: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim,
                              kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim)
        init_projection(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.proj(x.permute(0, 3, 1, 2))
        return self.norm(x.permute(0, 2, 3, 1))


class PatchMerge(nn.Module):
    """2x spatial downsample, 2x channel up: (B,H,W,C) -> (B,H/2,W/2,2C)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)
        init_projection(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        x = x.view(b, h // 2, 2, w // 2, 2, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * c)
        return self.reduction(self.norm(x))


class PatchExpand(nn.Module):
    """2x spatial upsample, channel halve: (B,H,W,C) -> (B,2H,2W,C/2)."""

    def __init__(self, dim: int):
        super().__init__()
        self.expand = nn.Linear(dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(dim // 2)
        init_projection(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        x = self.expand(x).view(b, h, w, 2, 2, c // 2)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, c // 2)
        return self.norm(x)


class FinalExpansion(nn.Module):
    """Back to pixel resolution via successive 2x patch expansions.

    Each step doubles the sides and halves the channels, so the output width
    is dim / patch_size (patch_size must be a power of two dividing dim).
    Cheaper than a single patch_size^2 expansion at full width.
    """

    def __init__(self, dim: int, patch_size: int):
        super().__init__()
        stages = []
        p = patch_size
        out_dim = dim
        while p > 1:
            stages.append(PatchExpand(out_dim))
            out_dim //= 2
            p //= 2
        self.stages = nn.ModuleList(stages)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages:
            x = stage(x)
        return x


class TokenMlpBottleneck(nn.Module):
    """Axial-shift token MLP replacing the windowed-attention bottleneck.

    Channels are split into groups that are cyclically shifted along the
    width (offsets g - G//2 for group g), mixed by a learned channel
    projection with a GELU, then the same along the height; a LayerNorm and
    a reprojection MLP follow, with a residual from the input.
    """

    def __init__(self, dim: int, groups: int = TOKEN_SHIFT_GROUPS):
        super().__init__()
        self.dim = dim
        self.groups = groups
        self.mix_w = nn.Linear(dim, dim)
        self.mix_h = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.reproject = nn.Linear(dim, dim)
        self.act = nn.GELU()
        init_projection(self)

    def _axial_shift(self, x: torch.Tensor, axis: int) -> torch.Tensor:
        chunks = torch.chunk(x, self.groups, dim=-1)
        shifted = [
            torch.roll(chunk, shifts=g - self.groups // 2, dims=axis)
            for g, chunk in enumerate(chunks)
        ]
        return torch.cat(shifted, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.ndim == 3
        if single:
            x = x.unsqueeze(0)
        shortcut = x
        x = self.act(self.mix_w(self._axial_shift(x, axis=2)))
        x = self.act(self.mix_h(self._axial_shift(x, axis=1)))
        x = self.reproject(self.norm(x))
        x = shortcut + x
        return x.squeeze(0) if single else x
