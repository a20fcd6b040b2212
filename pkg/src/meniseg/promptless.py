"""Promptless single-mask adaptation of a promptable 2D ViT segmenter.

The stock foundation segmenter takes an image plus point/box/mask prompts and
emits several candidate masks. Here the prompt pathway is removed from the
API: the two-way mask decoder is fed a fixed learned "no-prompt" token and a
learned dense no-prompt embedding, and exactly one mask logit map is returned.
The parameter layout of the ``base`` preset matches the published ViT-B
checkpoint so its weights can be loaded directly (see
``load_foundation_weights``); the ``toy`` preset is a scaled-down version for
CPU-sized experiments.

Logit maps come out at the decoder grid (4x the patch grid);
``upsample_logits``/``forward_upscaled`` bring them to the input grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import Image2D, extract_slices, prepare_backbone_input, restore_slice_mask, stack_slices
from .unet3d import parameter_count
from .volume import BinaryMask, Volume

FREEZE_DECODER_ONLY = "decoder_only"
FREEZE_END_TO_END = "end_to_end"
FREEZE_POLICIES = (FREEZE_DECODER_ONLY, FREEZE_END_TO_END)

# Trainable-parameter counts of the base preset with genuine weights loaded.
BASE_DECODER_ONLY_PARAMS = 4_058_340
BASE_END_TO_END_PARAMS = 93_735_472

# Input normalization constants native to the published backbone (applied to
# 0..255-scaled pixels). Retained even though our windowed inputs live in
# [0, 1]; see README for the rationale.
PIXEL_MEAN = (123.675, 116.28, 103.53)
PIXEL_STD = (58.395, 57.12, 57.375)


@dataclass(frozen=True)
class PromptlessViTConfig:
    image_size: int = 1024
    patch_size: int = 16
    encoder_embed_dim: int = 768
    encoder_depth: int = 12
    encoder_num_heads: int = 12
    encoder_mlp_ratio: float = 4.0
    encoder_window_size: int = 14  # 0 disables windowing (all-global attention)
    encoder_global_attn_indexes: tuple[int, ...] = (2, 5, 8, 11)
    transformer_dim: int = 256  # decoder/neck embedding width
    decoder_depth: int = 2
    decoder_num_heads: int = 8
    decoder_mlp_dim: int = 2048
    iou_head_hidden_dim: int = 256
    iou_head_depth: int = 3
    output_masks: int = 1
    foundation_prompt_params: bool = True  # retain the unused stock prompt parameters

    def validate(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.output_masks != 1:
            raise ValueError("this adapter emits exactly one mask; output_masks must be 1")
        if self.encoder_embed_dim % self.encoder_num_heads != 0:
            raise ValueError("encoder embed dim must divide evenly across heads")
        if self.transformer_dim % 8 != 0:
            raise ValueError("transformer_dim must be divisible by 8 (decoder upscaling)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def decoder_resolution(self) -> int:
        return 4 * self.grid_size


def toy_config() -> PromptlessViTConfig:
    """CPU-sized preset (~1.6M parameters, 128x128 inputs)."""
    return PromptlessViTConfig(
        image_size=128,
        patch_size=16,
        encoder_embed_dim=128,
        encoder_depth=3,
        encoder_num_heads=4,
        encoder_window_size=0,
        encoder_global_attn_indexes=(),
        transformer_dim=128,
        decoder_depth=2,
        decoder_num_heads=4,
        decoder_mlp_dim=512,
        iou_head_hidden_dim=128,
        foundation_prompt_params=False,
    )


def base_config() -> PromptlessViTConfig:
    """ViT-B preset, parameter-compatible with the published checkpoint."""
    return PromptlessViTConfig()


PRESETS = {"toy": toy_config, "base": base_config}


# ---------------------------------------------------------------------------
# Image encoder: ViT with optional windowed attention and decomposed relative
# position embeddings, followed by a convolutional neck.
# ---------------------------------------------------------------------------


class LayerNorm2d(nn.Module):
    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLPBlock(nn.Module):
    def __init__(self, embedding_dim: int, mlp_dim: int):
        super().__init__()
        self.lin1 = nn.Linear(embedding_dim, mlp_dim)
        self.lin2 = nn.Linear(mlp_dim, embedding_dim)
        self.act = nn.GELU()

    def forward(self, x):
        return self.lin2(self.act(self.lin1(x)))


def window_partition(x, window_size):
    B, H, W, C = x.shape
    pad_h = (-H) % window_size
    pad_w = (-W) % window_size
    if pad_h or pad_w:
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
    Hp, Wp = H + pad_h, W + pad_w
    x = x.view(B, Hp // window_size, window_size, Wp // window_size, window_size, C)
    windows = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window_size, window_size, C)
    return windows, (Hp, Wp)


def window_unpartition(windows, window_size, pad_hw, hw):
    Hp, Wp = pad_hw
    H, W = hw
    B = windows.shape[0] // (Hp * Wp // window_size // window_size)
    x = windows.view(B, Hp // window_size, Wp // window_size, window_size, window_size, -1)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, Hp, Wp, -1)
    return x[:, :H, :W, :].contiguous()


def get_rel_pos(q_size, k_size, rel_pos):
    max_rel_dist = 2 * max(q_size, k_size) - 1
    if rel_pos.shape[0] != max_rel_dist:
        rel_pos_resized = F.interpolate(
            rel_pos.reshape(1, rel_pos.shape[0], -1).permute(0, 2, 1),
            size=max_rel_dist,
            mode="linear",
        ).reshape(-1, max_rel_dist).permute(1, 0)
    else:
        rel_pos_resized = rel_pos
    q_coords = torch.arange(q_size)[:, None] * max(k_size / q_size, 1.0)
    k_coords = torch.arange(k_size)[None, :] * max(q_size / k_size, 1.0)
    relative_coords = (q_coords - k_coords) + (k_size - 1) * max(q_size / k_size, 1.0)
    return rel_pos_resized[relative_coords.long()]


def add_decomposed_rel_pos(attn, q, rel_pos_h, rel_pos_w, q_size, k_size):
    q_h, q_w = q_size
    k_h, k_w = k_size
    Rh = get_rel_pos(q_h, k_h, rel_pos_h)
    Rw = get_rel_pos(q_w, k_w, rel_pos_w)
    B, _, dim = q.shape
    r_q = q.reshape(B, q_h, q_w, dim)
    rel_h = torch.einsum("bhwc,hkc->bhwk", r_q, Rh)
    rel_w = torch.einsum("bhwc,wkc->bhwk", r_q, Rw)
    attn = (
        attn.view(B, q_h, q_w, k_h, k_w)
        + rel_h[:, :, :, :, None]
        + rel_w[:, :, :, None, :]
    ).view(B, q_h * q_w, k_h * k_w)
    return attn


class EncoderAttention(nn.Module):
    """Multi-head attention over (B, H, W, C) with decomposed relative positions."""

    def __init__(self, dim, num_heads, input_size, use_rel_pos=True):
        super().__init__()
        self.num_heads = num_heads
        head_dim = dim // num_heads
        self.scale = head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.use_rel_pos = use_rel_pos
        if use_rel_pos:
            self.rel_pos_h = nn.Parameter(torch.zeros(2 * input_size[0] - 1, head_dim))
            self.rel_pos_w = nn.Parameter(torch.zeros(2 * input_size[1] - 1, head_dim))

    def forward(self, x):
        B, H, W, _ = x.shape
        qkv = self.qkv(x).reshape(B, H * W, 3, self.num_heads, -1).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.reshape(3, B * self.num_heads, H * W, -1).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        if self.use_rel_pos:
            attn = add_decomposed_rel_pos(attn, q, self.rel_pos_h, self.rel_pos_w, (H, W), (H, W))
        attn = attn.softmax(dim=-1)
        x = (attn @ v).view(B, self.num_heads, H, W, -1).permute(0, 2, 3, 1, 4).reshape(B, H, W, -1)
        return self.proj(x)


class EncoderBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio, window_size, input_size):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        attn_input = (window_size, window_size) if window_size > 0 else input_size
        self.attn = EncoderAttention(dim, num_heads, input_size=attn_input)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))
        self.window_size = window_size

    def forward(self, x):
        shortcut = x
        x = self.norm1(x)
        if self.window_size > 0:
            H, W = x.shape[1], x.shape[2]
            x, pad_hw = window_partition(x, self.window_size)
        x = self.attn(x)
        if self.window_size > 0:
            x = window_unpartition(x, self.window_size, pad_hw, (H, W))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class ImageEncoderViT(nn.Module):
    def __init__(self, cfg: PromptlessViTConfig):
        super().__init__()
        grid = cfg.grid_size
        dim = cfg.encoder_embed_dim
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid, grid, dim))
        self.blocks = nn.ModuleList(
            EncoderBlock(
                dim,
                cfg.encoder_num_heads,
                cfg.encoder_mlp_ratio,
                window_size=(
                    0
                    if (cfg.encoder_window_size == 0 or i in cfg.encoder_global_attn_indexes)
                    else cfg.encoder_window_size
                ),
                input_size=(grid, grid),
            )
            for i in range(cfg.encoder_depth)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(dim, cfg.transformer_dim, kernel_size=1, bias=False),
            LayerNorm2d(cfg.transformer_dim),
            nn.Conv2d(cfg.transformer_dim, cfg.transformer_dim, kernel_size=3, padding=1, bias=False),
            LayerNorm2d(cfg.transformer_dim),
        )

    def forward(self, x):
        x = self.patch_embed(x).permute(0, 2, 3, 1)  # B, H, W, C
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.neck(x.permute(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# No-prompt replacement for the prompt encoder. Supplies one learned sparse
# token and a learned dense embedding; optionally retains the remaining stock
# prompt parameters so genuine checkpoints load without surgery.
# ---------------------------------------------------------------------------


class PositionEmbeddingRandom(nn.Module):
    """Random-Fourier positional encoding over the embedding grid (a buffer,
    not a trainable parameter)."""

    def __init__(self, num_pos_feats: int):
        super().__init__()
        self.register_buffer(
            "positional_encoding_gaussian_matrix", torch.randn(2, num_pos_feats)
        )

    def forward(self, size: tuple[int, int]) -> torch.Tensor:
        h, w = size
        device = self.positional_encoding_gaussian_matrix.device
        grid = torch.ones(h, w, device=device)
        y = (grid.cumsum(dim=0) - 0.5) / h
        x = (grid.cumsum(dim=1) - 0.5) / w
        coords = torch.stack([x, y], dim=-1)
        coords = (2 * coords - 1) @ self.positional_encoding_gaussian_matrix
        coords = 2 * math.pi * coords
        return torch.cat([torch.sin(coords), torch.cos(coords)], dim=-1).permute(2, 0, 1)


class NullPrompt(nn.Module):
    def __init__(self, cfg: PromptlessViTConfig):
        super().__init__()
        dim = cfg.transformer_dim
        self.pe_layer = PositionEmbeddingRandom(dim // 2)
        self.not_a_point_embed = nn.Embedding(1, dim)
        self.no_mask_embed = nn.Embedding(1, dim)
        if cfg.foundation_prompt_params:
            # Unused by the promptless forward pass; kept so state dicts of the
            # stock promptable model map one-to-one onto this module.
            self.point_embeddings = nn.ModuleList(nn.Embedding(1, dim) for _ in range(4))
            mask_in_chans = 16
            self.mask_downscaling = nn.Sequential(
                nn.Conv2d(1, mask_in_chans // 4, kernel_size=2, stride=2),
                LayerNorm2d(mask_in_chans // 4),
                nn.GELU(),
                nn.Conv2d(mask_in_chans // 4, mask_in_chans, kernel_size=2, stride=2),
                LayerNorm2d(mask_in_chans),
                nn.GELU(),
                nn.Conv2d(mask_in_chans, dim, kernel_size=1),
            )

    def forward(self, batch_size: int, grid: tuple[int, int]):
        sparse = self.not_a_point_embed.weight.reshape(1, 1, -1).expand(batch_size, -1, -1)
        dense = (
            self.no_mask_embed.weight.reshape(1, -1, 1, 1).expand(batch_size, -1, grid[0], grid[1])
        )
        return sparse, dense

    def dense_pe(self, grid: tuple[int, int]) -> torch.Tensor:
        return self.pe_layer(grid).unsqueeze(0)


# ---------------------------------------------------------------------------
# Two-way transformer mask decoder.
# ---------------------------------------------------------------------------


class DecoderAttention(nn.Module):
    """Attention with an optional internal downsampling of the embedding."""

    def __init__(self, embedding_dim, num_heads, downsample_rate=1):
        super().__init__()
        self.internal_dim = embedding_dim // downsample_rate
        self.num_heads = num_heads
        self.q_proj = nn.Linear(embedding_dim, self.internal_dim)
        self.k_proj = nn.Linear(embedding_dim, self.internal_dim)
        self.v_proj = nn.Linear(embedding_dim, self.internal_dim)
        self.out_proj = nn.Linear(self.internal_dim, embedding_dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v):
        q = self._split(self.q_proj(q))
        k = self._split(self.k_proj(k))
        v = self._split(self.v_proj(v))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        attn = attn.softmax(dim=-1)
        out = attn @ v
        b, h, n, d = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * d))


class TwoWayAttentionBlock(nn.Module):
    def __init__(self, embedding_dim, num_heads, mlp_dim, skip_first_layer_pe=False):
        super().__init__()
        self.self_attn = DecoderAttention(embedding_dim, num_heads)
        self.norm1 = nn.LayerNorm(embedding_dim)
        self.cross_attn_token_to_image = DecoderAttention(embedding_dim, num_heads, downsample_rate=2)
        self.norm2 = nn.LayerNorm(embedding_dim)
        self.mlp = MLPBlock(embedding_dim, mlp_dim)
        self.norm3 = nn.LayerNorm(embedding_dim)
        self.cross_attn_image_to_token = DecoderAttention(embedding_dim, num_heads, downsample_rate=2)
        self.norm4 = nn.LayerNorm(embedding_dim)
        self.skip_first_layer_pe = skip_first_layer_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_layer_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_attn_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_attn_image_to_token(k, q, queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth, embedding_dim, num_heads, mlp_dim):
        super().__init__()
        self.layers = nn.ModuleList(
            TwoWayAttentionBlock(embedding_dim, num_heads, mlp_dim, skip_first_layer_pe=(i == 0))
            for i in range(depth)
        )
        self.final_attn_token_to_image = DecoderAttention(embedding_dim, num_heads, downsample_rate=2)
        self.norm_final_attn = nn.LayerNorm(embedding_dim)

    def forward(self, image_embedding, image_pe, point_embedding):
        b, c, h, w = image_embedding.shape
        keys = image_embedding.flatten(2).permute(0, 2, 1)
        key_pe = image_pe.flatten(2).permute(0, 2, 1)
        queries = point_embedding
        for layer in self.layers:
            queries, keys = layer(queries, keys, point_embedding, key_pe)
        q = queries + point_embedding
        k = keys + key_pe
        queries = self.norm_final_attn(queries + self.final_attn_token_to_image(q, k, keys))
        return queries, keys


class MLP(nn.Module):
    def __init__(self, input_dim, hidden_dim, output_dim, num_layers):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [output_dim])
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class MaskDecoder(nn.Module):
    """Stock token inventory (candidate-mask tokens + quality token) is kept
    for checkpoint compatibility; only the primary mask is exposed."""

    NUM_MASK_TOKENS = 4

    def __init__(self, cfg: PromptlessViTConfig):
        super().__init__()
        dim = cfg.transformer_dim
        self.transformer = TwoWayTransformer(
            cfg.decoder_depth, dim, cfg.decoder_num_heads, cfg.decoder_mlp_dim
        )
        self.iou_token = nn.Embedding(1, dim)
        self.mask_tokens = nn.Embedding(self.NUM_MASK_TOKENS, dim)
        self.output_upscaling = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 4, kernel_size=2, stride=2),
            LayerNorm2d(dim // 4),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 4, dim // 8, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.output_hypernetworks_mlps = nn.ModuleList(
            MLP(dim, dim, dim // 8, 3) for _ in range(self.NUM_MASK_TOKENS)
        )
        self.iou_prediction_head = MLP(
            dim, cfg.iou_head_hidden_dim, self.NUM_MASK_TOKENS, cfg.iou_head_depth
        )

    def forward(self, image_embedding, image_pe, sparse_prompt, dense_prompt):
        b = image_embedding.shape[0]
        output_tokens = torch.cat([self.iou_token.weight, self.mask_tokens.weight], dim=0)
        tokens = torch.cat([output_tokens.unsqueeze(0).expand(b, -1, -1), sparse_prompt], dim=1)
        src = image_embedding + dense_prompt
        pos = image_pe.expand(b, -1, -1, -1)
        hs, src = self.transformer(src, pos, tokens)
        mask_tokens_out = hs[:, 1 : 1 + self.NUM_MASK_TOKENS, :]

        h = w = int(math.sqrt(src.shape[1]))
        src = src.transpose(1, 2).view(b, -1, h, w)
        upscaled = self.output_upscaling(src)
        hyper_in = torch.stack(
            [mlp(mask_tokens_out[:, i, :]) for i, mlp in enumerate(self.output_hypernetworks_mlps)],
            dim=1,
        )
        bb, cc, hh, ww = upscaled.shape
        masks = (hyper_in @ upscaled.view(bb, cc, hh * ww)).view(bb, -1, hh, ww)
        return masks[:, 0:1, :, :]  # primary mask only


# ---------------------------------------------------------------------------
# The full promptless segmenter.
# ---------------------------------------------------------------------------


class PromptlessSegmenter(nn.Module):
    """Image in, one mask-logit map out. No prompt inputs exist on the API."""

    def __init__(self, config: PromptlessViTConfig | None = None):
        super().__init__()
        config = config or toy_config()
        config.validate()
        self.config = config
        self.image_encoder = ImageEncoderViT(config)
        self.null_prompt = NullPrompt(config)
        self.mask_decoder = MaskDecoder(config)
        self.register_buffer("pixel_mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images (N, 3, S, S) in [0, 1] -> mask logits (N, 1, S/4, S/4)."""
        s = self.config.image_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (s, s):
            raise ValueError(
                f"expected images (N, 3, {s}, {s}), got {tuple(images.shape)}"
            )
        x = (images * 255.0 - self.pixel_mean) / self.pixel_std
        embedding = self.image_encoder(x)
        grid = embedding.shape[-2:]
        sparse, dense = self.null_prompt(images.shape[0], grid)
        image_pe = self.null_prompt.dense_pe(grid)
        return self.mask_decoder(embedding, image_pe, sparse, dense)

    def upsample_logits(self, logits: torch.Tensor) -> torch.Tensor:
        s = self.config.image_size
        return F.interpolate(logits, size=(s, s), mode="bilinear", align_corners=False)

    def forward_upscaled(self, images: torch.Tensor) -> torch.Tensor:
        return self.upsample_logits(self(images))


def build_promptless_segmenter(config: PromptlessViTConfig | str | None = None) -> PromptlessSegmenter:
    if isinstance(config, str):
        try:
            config = PRESETS[config]()
        except KeyError:
            raise ValueError(f"unknown preset {config!r}; choose from {sorted(PRESETS)}") from None
    return PromptlessSegmenter(config)


def set_freeze_policy(model: PromptlessSegmenter, policy: str) -> int:
    """Apply a fine-tuning policy and return the exact trainable count.

    ``decoder_only`` freezes the entire image encoder and the no-prompt
    parameters, leaving the mask decoder; ``end_to_end`` unfreezes everything.
    """
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}; choose from {FREEZE_POLICIES}")
    if policy == FREEZE_DECODER_ONLY:
        model.image_encoder.requires_grad_(False)
        model.null_prompt.requires_grad_(False)
        model.mask_decoder.requires_grad_(True)
    else:
        model.requires_grad_(True)
    return parameter_count(model, trainable_only=True)


def forward_2d(model: PromptlessSegmenter, images: Sequence[Image2D], device="cpu") -> np.ndarray:
    """Run a batch of prepared images; returns logits (N, S/4, S/4) on the
    decoder grid."""
    model = model.to(device).eval()
    batch = torch.stack(
        [torch.from_numpy(img.data).permute(2, 0, 1) for img in images]
    ).to(device)
    with torch.no_grad():
        logits = model(batch)
    return logits[:, 0].cpu().numpy()


@torch.no_grad()
def predict_volume(
    model: PromptlessSegmenter,
    volume: Volume,
    axis=None,
    batch_size: int = 16,
    device="cpu",
) -> BinaryMask:
    """Slice-wise 3D prediction: extract sagittal slices, prepare them for the
    backbone, threshold sigmoid logits at 0.5 on the backbone grid, invert the
    preparation per slice, and stack. Output geometry equals input geometry."""
    model = model.to(device).eval()
    slices = extract_slices(volume, axis=axis)
    prepared = [prepare_backbone_input(s, target=model.config.image_size) for s in slices]
    restored = []
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start : start + batch_size]
        batch = torch.stack(
            [torch.from_numpy(img.data).permute(2, 0, 1) for img in chunk]
        ).to(device)
        probs = torch.sigmoid(model.forward_upscaled(batch))
        binary = (probs >= 0.5).float()[:, 0].cpu().numpy()
        restored.extend(restore_slice_mask(binary[i], chunk[i]) for i in range(len(chunk)))
    return stack_slices(restored, like=volume, axis=axis)


# ---------------------------------------------------------------------------
# Loading genuine foundation weights (base preset).
# ---------------------------------------------------------------------------

# Key mapping from the published promptable checkpoint to this model:
#   image_encoder.*   -> image_encoder.*        (identical layout)
#   prompt_encoder.*  -> null_prompt.*          (identical layout)
#   mask_decoder.*    -> mask_decoder.*         (identical layout)
_FOUNDATION_PREFIX_MAP = {"prompt_encoder.": "null_prompt."}


def load_foundation_weights(model: PromptlessSegmenter, path, strict: bool = True):
    """Load a published promptable ViT-B checkpoint into the base preset."""
    if not model.config.foundation_prompt_params:
        raise ValueError("foundation weights require a config with foundation_prompt_params=True")
    state = torch.load(path, map_location="cpu", weights_only=True)
    remapped = {}
    for key, value in state.items():
        for old, new in _FOUNDATION_PREFIX_MAP.items():
            if key.startswith(old):
                key = new + key[len(old) :]
                break
        remapped[key] = value
    missing, unexpected = model.load_state_dict(remapped, strict=False)
    # our normalization buffers are not part of the published checkpoint
    missing = [k for k in missing if k not in ("pixel_mean", "pixel_std")]
    if strict and (missing or unexpected):
        raise ValueError(
            f"checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}"
        )
    return model
