"""Dual-branch transformer backbone for multi-label attribute recognition.

One branch is a hierarchical transformer over shifting local windows; the
other is a plain patch transformer with a class token.  Each branch yields a
single vector that is refined by attending over the *other* branch's tokens,
and the two fused vectors are concatenated into the person feature that the
sigmoid head reads.

Every attention module stashes its most recent post-softmax weights in
``.last_attention`` so callers can inspect where the model looked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError


def _default_heads(dim: int) -> int:
    return max(1, dim // 32)


@dataclass(frozen=True)
class BackboneConfig:
    """Hyper-parameters for the two branches and their fusion.

    The defaults reproduce the full-size model; tests and the synthetic
    pipeline use :func:`tiny_config`.
    """

    image_hw: tuple[int, int] = (256, 128)
    n_attr: int = 26
    # hierarchical branch
    swin_patch: int = 4
    swin_dims: tuple[int, ...] = (128, 256, 512, 1024)
    swin_depths: tuple[int, ...] = (2, 2, 6, 2)
    window: int = 12
    swin_heads: tuple[int, ...] = ()  # empty -> dim // 32 per stage
    # plain branch
    vit_patch: int = 14
    vit_dim: int = 1024
    vit_depth: int = 12
    vit_heads: int = 0  # 0 -> dim // 32
    # fusion
    fusion_dim: int = 768
    fusion_heads: int = 0
    casa_value_path: bool = False  # residual carries att @ V instead of att @ M
    mlp_ratio: float = 4.0

    def __post_init__(self):
        h, w = self.image_hw
        if h <= 0 or w <= 0:
            raise ConfigError(f"bad image size {self.image_hw}")
        if len(self.swin_dims) != len(self.swin_depths) or not self.swin_dims:
            raise ConfigError(
                f"swin_dims {self.swin_dims} and swin_depths {self.swin_depths} "
                "must be equal-length and non-empty"
            )
        if h % self.swin_patch or w % self.swin_patch:
            raise ConfigError(
                f"image {self.image_hw} not divisible by patch {self.swin_patch}"
            )
        halvings = 2 ** (self.n_stages - 1)
        g0 = (h // self.swin_patch, w // self.swin_patch)
        if g0[0] % halvings or g0[1] % halvings:
            raise ConfigError(
                f"base grid {g0} cannot be halved {self.n_stages - 1} times"
            )
        if min(h, w) < self.vit_patch:
            raise ConfigError(
                f"image {self.image_hw} smaller than vit patch {self.vit_patch}"
            )
        for dim, heads in zip(self.swin_dims, self.stage_heads):
            if dim % heads:
                raise ConfigError(f"swin dim {dim} not divisible by {heads} heads")
        if self.vit_dim % self.n_vit_heads:
            raise ConfigError(
                f"vit dim {self.vit_dim} not divisible by {self.n_vit_heads} heads"
            )
        if self.fusion_dim % self.n_fusion_heads:
            raise ConfigError(
                f"fusion dim {self.fusion_dim} not divisible by "
                f"{self.n_fusion_heads} heads"
            )
        if self.n_attr <= 0:
            raise ConfigError(f"n_attr must be positive, got {self.n_attr}")
        if self.window <= 0:
            raise ConfigError(f"window must be positive, got {self.window}")

    @property
    def n_stages(self) -> int:
        return len(self.swin_dims)

    @property
    def stage_heads(self) -> tuple[int, ...]:
        if self.swin_heads:
            return self.swin_heads
        return tuple(_default_heads(d) for d in self.swin_dims)

    @property
    def n_vit_heads(self) -> int:
        return self.vit_heads or _default_heads(self.vit_dim)

    @property
    def n_fusion_heads(self) -> int:
        return self.fusion_heads or _default_heads(self.fusion_dim)

    def swin_grid(self, stage: int) -> tuple[int, int]:
        """Token grid (h, w) at the input of a given stage."""
        h, w = self.image_hw
        return (
            h // self.swin_patch // (2**stage),
            w // self.swin_patch // (2**stage),
        )

    def vit_grid(self) -> tuple[int, int]:
        """Patch grid of the plain branch after snapping the image down to a
        multiple of the patch size."""
        h, w = self.image_hw
        return h // self.vit_patch, w // self.vit_patch

    def vit_tokens(self) -> int:
        gh, gw = self.vit_grid()
        return gh * gw

    @property
    def feature_dim(self) -> int:
        return 2 * self.fusion_dim


def full_size_config(n_attr: int = 26) -> BackboneConfig:
    """Full-size configuration for 256x128 inputs."""
    return BackboneConfig(n_attr=n_attr)


def tiny_config(n_attr: int = 8, image_hw: tuple[int, int] = (32, 16)) -> BackboneConfig:
    """Small configuration that trains in minutes on a CPU."""
    return BackboneConfig(
        image_hw=image_hw,
        n_attr=n_attr,
        swin_patch=4,
        swin_dims=(32, 64),
        swin_depths=(1, 1),
        window=4,
        vit_patch=8,
        vit_dim=64,
        vit_depth=2,
        fusion_dim=64,
    )


def grad_config(n_attr: int = 3) -> BackboneConfig:
    """Minimal configuration used for finite-difference gradient checks."""
    return BackboneConfig(
        image_hw=(16, 8),
        n_attr=n_attr,
        swin_patch=4,
        swin_dims=(8, 16),
        swin_depths=(1, 1),
        window=2,
        swin_heads=(1, 1),
        vit_patch=8,
        vit_dim=16,
        vit_depth=1,
        vit_heads=1,
        fusion_dim=16,
        fusion_heads=1,
    )


def _init_module(m: nn.Module) -> None:
    if isinstance(m, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class ChannelAwareAttention(nn.Module):
    """Self-attention over the channel axis of a token grid.

    The grid is flattened to a matrix M of shape (h*w, C); the query and key
    projections act on the *spatial* axis (weights are (h*w, h*w)), so the
    attention map compares spatial positions by their channel profiles and the
    softmax is scaled by sqrt(C).  The refined grid is M + att @ M.  A value
    projection is learned as well; `use_value_path` routes the residual
    through it (M + att @ V) instead of the direct form.
    """

    def __init__(self, n_tokens: int, use_value_path: bool = False):
        super().__init__()
        self.n_tokens = n_tokens
        self.use_value_path = use_value_path
        self.w_q = nn.Parameter(torch.empty(n_tokens, n_tokens))
        self.w_k = nn.Parameter(torch.empty(n_tokens, n_tokens))
        self.w_v = nn.Parameter(torch.empty(n_tokens, n_tokens))
        for p in (self.w_q, self.w_k, self.w_v):
            nn.init.trunc_normal_(p, std=0.02)
        self.last_attention: torch.Tensor | None = None

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(grid).all():
            raise NumericError("non-finite values entering channel attention")
        b, c, h, w = grid.shape
        n = h * w
        if n != self.n_tokens:
            raise ConfigError(
                f"channel attention built for {self.n_tokens} tokens, got {n}"
            )
        m = grid.flatten(2).transpose(1, 2)  # (b, n, c): rows are positions
        q = self.w_q @ m
        k = self.w_k @ m
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        self.last_attention = att.detach()
        src = self.w_v @ m if self.use_value_path else m
        out = m + att @ src
        return out.transpose(1, 2).reshape(b, c, h, w)


def _window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    # (b, h, w, c) -> (b * nWindows, ws*ws, c)
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def _window_reverse(win: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    b = win.shape[0] // (h // ws * (w // ws))
    x = win.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowedSelfAttention(nn.Module):
    """Multi-head attention inside square local windows.

    Alternate layers cyclically shift the grid by half a window so that
    neighbouring windows exchange information; content that wraps around the
    border is kept from attending across the seam.  Grids that do not divide
    the window are padded, and the padding never acts as a key.  Every query
    may attend to itself, so no softmax row is empty.
    """

    def __init__(self, dim: int, heads: int, window: int, shifted: bool):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.window = window
        self.shifted = shifted
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attention: torch.Tensor | None = None

    def _mask(
        self, hp: int, wp: int, h: int, w: int, ws: int, shift: int, device
    ) -> torch.Tensor:
        """Additive bias of shape (nWindows, ws*ws, ws*ws)."""
        region = torch.zeros(hp, wp, device=device)
        if shift:
            cnt = 0
            for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                    region[hs, wsl] = cnt
                    cnt += 1
        real = torch.zeros(hp, wp, dtype=torch.bool, device=device)
        real[:h, :w] = True
        if shift:
            real = torch.roll(real, shifts=(-shift, -shift), dims=(0, 1))
        rid = _window_partition(region[None, :, :, None], ws).squeeze(-1)
        rreal = _window_partition(real[None, :, :, None].float(), ws).squeeze(-1) > 0.5
        blocked = (rid.unsqueeze(1) != rid.unsqueeze(2)) | ~rreal.unsqueeze(1)
        n = ws * ws
        eye = torch.eye(n, dtype=torch.bool, device=device)
        blocked = blocked & ~eye
        bias = torch.zeros_like(blocked, dtype=torch.get_default_dtype())
        bias.masked_fill_(blocked, float("-inf"))
        return bias

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        ws = min(self.window, h, w)
        shift = ws // 2 if self.shifted and (h > ws or w > ws) else 0
        pad_b = (ws - h % ws) % ws
        pad_r = (ws - w % ws) % ws
        if pad_b or pad_r:
            x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        hp, wp = h + pad_b, w + pad_r
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        windows = _window_partition(x, ws)  # (b*nw, n, c)
        n = windows.shape[1]
        qkv = self.qkv(windows).reshape(-1, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b*nw, heads, n, hd)
        scores = q @ k.transpose(-2, -1) / math.sqrt(c // self.heads)
        bias = self._mask(hp, wp, h, w, ws, shift, x.device)
        nw = bias.shape[0]
        scores = scores.view(b, nw, self.heads, n, n) + bias[None, :, None]
        att = torch.softmax(scores, dim=-1).view(-1, self.heads, n, n)
        self.last_attention = att.detach()
        out = (att @ v).transpose(1, 2).reshape(-1, n, c)
        out = self.proj(out)
        x = _window_reverse(out, ws, hp, wp)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        return x[:, :h, :w]


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class SwinLayer(nn.Module):
    """Pre-norm windowed attention block with a 4x MLP."""

    def __init__(self, dim: int, heads: int, window: int, shifted: bool, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowedSelfAttention(dim, heads, window, shifted)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat followed by a linear projection."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim_in)
        self.reduction = nn.Linear(4 * dim_in, dim_out, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        x = torch.cat([x0, x1, x2, x3], dim=-1)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    """A run of window-attention layers, optionally downsampling on exit.

    Accepts and returns channel-first grids (b, c, h, w); layers operate
    channel-last internally.
    """

    def __init__(
        self,
        dim: int,
        depth: int,
        heads: int,
        window: int,
        mlp_ratio: float,
        out_dim: int | None,
    ):
        super().__init__()
        self.layers = nn.ModuleList(
            SwinLayer(dim, heads, window, shifted=bool(i % 2), mlp_ratio=mlp_ratio)
            for i in range(depth)
        )
        self.merge = PatchMerging(dim, out_dim) if out_dim is not None else None

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        x = grid.permute(0, 2, 3, 1)
        for layer in self.layers:
            x = layer(x)
        if self.merge is not None:
            x = self.merge(x)
        return x.permute(0, 3, 1, 2)


class VitPatchEmbed(nn.Module):
    """Resize to a patch multiple, cut patches, prepend CLS, add positions."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        h, w = cfg.image_hw
        self.patch = cfg.vit_patch
        self.target_hw = (h // self.patch * self.patch, w // self.patch * self.patch)
        self.proj = nn.Conv2d(3, cfg.vit_dim, kernel_size=self.patch, stride=self.patch)
        n = cfg.vit_tokens()
        self.cls_token = nn.Parameter(torch.empty(1, 1, cfg.vit_dim))
        self.pos_embed = nn.Parameter(torch.empty(1, n + 1, cfg.vit_dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-2:] != self.target_hw:
            image = F.interpolate(
                image, size=self.target_hw, mode="bilinear", align_corners=False
            )
        x = self.proj(image).flatten(2).transpose(1, 2)  # (b, n, d)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(c // self.heads), dim=-1)
        self.last_attention = att.detach()
        out = (att @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class VitBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossTokenFusion(nn.Module):
    """One branch's summary vector attends over the other branch's tokens.

    The query vector is aligned to the fusion width (bias-free), becomes both
    the attention query and the first element of the key/value sequence, and
    the attended context is added back before a final bias-free projection.
    All projections inside the attention are bias-free as well.
    """

    def __init__(self, query_dim: int, token_dim: int, fusion_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.fusion_dim = fusion_dim
        self.query_align = nn.Linear(query_dim, fusion_dim, bias=False)
        self.token_align = nn.Linear(token_dim, fusion_dim, bias=False)
        self.w_q = nn.Linear(fusion_dim, fusion_dim, bias=False)
        self.w_k = nn.Linear(fusion_dim, fusion_dim, bias=False)
        self.w_v = nn.Linear(fusion_dim, fusion_dim, bias=False)
        self.out_proj = nn.Linear(fusion_dim, fusion_dim, bias=False)
        self.last_attention: torch.Tensor | None = None

    def forward(self, query_vec: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        b = query_vec.shape[0]
        hd = self.fusion_dim // self.heads
        za = self.query_align(query_vec)  # (b, f)
        seq = torch.cat([za.unsqueeze(1), self.token_align(tokens)], dim=1)
        q = self.w_q(za).reshape(b, 1, self.heads, hd).transpose(1, 2)
        k = self.w_k(seq).reshape(b, -1, self.heads, hd).transpose(1, 2)
        v = self.w_v(seq).reshape(b, -1, self.heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        self.last_attention = att.detach()
        ctx = (att @ v).transpose(1, 2).reshape(b, self.fusion_dim)
        return self.out_proj(za + ctx)


@dataclass
class BackboneOutput:
    """Forward products, batch-first.

    feature is the concatenation of the two normalized fused vectors and is
    what downstream retrieval consumes; probs are per-attribute sigmoids.
    """

    m_s: torch.Tensor
    m_v: torch.Tensor
    feature: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor


class CrossTransformerBackbone(nn.Module):
    """The full two-branch recognizer.

    Construction consumes the global torch RNG; seed beforehand for
    reproducible initialization.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.swin_embed = nn.Conv2d(
            3, cfg.swin_dims[0], kernel_size=cfg.swin_patch, stride=cfg.swin_patch
        )
        casa, stages = [], []
        heads = cfg.stage_heads
        for i, (dim, depth) in enumerate(zip(cfg.swin_dims, cfg.swin_depths)):
            gh, gw = cfg.swin_grid(i)
            casa.append(ChannelAwareAttention(gh * gw, cfg.casa_value_path))
            out_dim = cfg.swin_dims[i + 1] if i + 1 < cfg.n_stages else None
            stages.append(
                SwinStage(dim, depth, heads[i], cfg.window, cfg.mlp_ratio, out_dim)
            )
        self.casa = nn.ModuleList(casa)
        self.stages = nn.ModuleList(stages)
        # merges sit between stages, so the final grid is the last stage's own
        fh, fw = cfg.swin_grid(cfg.n_stages - 1)
        self.final_swin_grid = (fh, fw)
        self.swin_proj = nn.Linear(cfg.swin_dims[-1] * fh * fw, cfg.fusion_dim)

        self.vit_embed = VitPatchEmbed(cfg)
        self.vit_blocks = nn.ModuleList(
            VitBlock(cfg.vit_dim, cfg.n_vit_heads, cfg.mlp_ratio)
            for _ in range(cfg.vit_depth)
        )

        self.svcf = CrossTokenFusion(
            cfg.fusion_dim, cfg.vit_dim, cfg.fusion_dim, cfg.n_fusion_heads
        )
        self.vscf = CrossTokenFusion(
            cfg.vit_dim, cfg.swin_dims[-1], cfg.fusion_dim, cfg.n_fusion_heads
        )
        self.norm_s = nn.LayerNorm(cfg.fusion_dim)
        self.norm_v = nn.LayerNorm(cfg.fusion_dim)
        self.head = nn.Linear(cfg.feature_dim, cfg.n_attr)
        self.apply(_init_module)

    def forward(self, image: torch.Tensor) -> BackboneOutput:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.shape[1] != 3 or image.shape[-2:] != torch.Size(self.cfg.image_hw):
            raise ConfigError(
                f"expected (b, 3, {self.cfg.image_hw[0]}, {self.cfg.image_hw[1]}) "
                f"images, got {tuple(image.shape)}"
            )
        grid = self.swin_embed(image)
        for attn, stage in zip(self.casa, self.stages):
            grid = stage(attn(grid))
        z_s = self.swin_proj(grid.flatten(1))

        seq = self.vit_embed(image)
        for blk in self.vit_blocks:
            seq = blk(seq)
        cls, vit_tokens = seq[:, 0], seq[:, 1:]

        swin_tokens = grid.flatten(2).transpose(1, 2)  # (b, h*w, c)
        m_s = self.norm_s(self.svcf(z_s, vit_tokens))
        m_v = self.norm_v(self.vscf(cls, swin_tokens))
        feature = torch.cat([m_s, m_v], dim=-1)
        logits = self.head(feature)
        return BackboneOutput(
            m_s=m_s,
            m_v=m_v,
            feature=feature,
            logits=logits,
            probs=torch.sigmoid(logits),
        )

    @torch.no_grad()
    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Person feature only, for gallery building."""
        return self.forward(image).feature
