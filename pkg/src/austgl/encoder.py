"""Masked-autoencoder facial representation encoder.

Frames are cut into non-overlapping square patches, linearly projected and
given fixed 2-D sin-cos positions. In pretraining mode a random subset of
patches is hidden from the encoder and a light decoder reconstructs the raw
pixels of the hidden patches. In detection mode the decoder is dropped and
every patch is encoded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn


class ConfigError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


@dataclass
class EncoderConfig:
    image_size: tuple = (64, 64)
    in_chans: int = 3
    patch_size: int = 16
    embed_dim: int = 64
    encoder_depth: int = 4
    num_heads: int = 4
    decoder_embed_dim: Optional[int] = None
    decoder_depth: int = 2
    decoder_num_heads: Optional[int] = None
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.decoder_embed_dim is None:
            self.decoder_embed_dim = self.embed_dim
        if self.decoder_num_heads is None:
            self.decoder_num_heads = self.num_heads

    def validate(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image size {self.image_size} is not a multiple of patch {self.patch_size}")
        if self.embed_dim % self.num_heads or self.decoder_embed_dim % self.decoder_num_heads:
            raise ConfigError("embedding width must be divisible by the head count")
        # 2-D sin-cos embeddings split the width into four sin/cos blocks
        if self.embed_dim % 4 or self.decoder_embed_dim % 4:
            raise ConfigError("embedding widths must be divisible by 4")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ConfigError("encoder and decoder depth must be >= 1")
        return self

    @property
    def grid(self):
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self):
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.in_chans


DESK_PRESET = dict(image_size=(64, 64), patch_size=16, embed_dim=64, encoder_depth=4,
                   decoder_depth=2, num_heads=4)
# patch size and width are not published for the 256px model; ViT-B/16 values
FULL_SCALE_PRESET = dict(image_size=(256, 256), patch_size=16, embed_dim=768, encoder_depth=12,
                    decoder_embed_dim=512, decoder_depth=4, num_heads=12, decoder_num_heads=16)


@dataclass
class FrameSequence:
    """A clip of T frames (T x C x H x W in [0, 1]) plus its padding mask."""

    frames: np.ndarray
    valid_mask: np.ndarray
    clip_id: object = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)

    def __len__(self):
        return self.frames.shape[0]

    def validate(self, cfg: EncoderConfig):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ConfigError(f"expected T x C x H x W frames, got {self.frames.shape}")
        if self.frames.shape[1:] != (cfg.in_chans, *cfg.image_size):
            raise ConfigError(f"frame shape {self.frames.shape[1:]} does not match "
                              f"config {(cfg.in_chans, *cfg.image_size)}")
        if self.valid_mask.shape != (self.frames.shape[0],):
            raise ConfigError("valid_mask length must equal T")
        if np.any(self.frames[~self.valid_mask] != 0):
            raise ConfigError("padded frames must be blank")
        return self


@dataclass
class MaskSpec:
    masked_indices: np.ndarray  # (num_frames, M), sorted per row
    mask_ratio: float
    num_patches: int = field(default=0)

    @property
    def num_masked(self):
        return self.masked_indices.shape[1]

    @property
    def visible_indices(self):
        keep = np.ones((len(self.masked_indices), self.num_patches), dtype=bool)
        np.put_along_axis(keep, self.masked_indices, False, axis=1)
        return np.nonzero(keep)[1].reshape(len(keep), -1)


def num_masked_for(m, mask_ratio):
    return int(np.floor(mask_ratio * m + 0.5))


def sample_mask(m, mask_ratio, rng_seed, num_frames=1) -> MaskSpec:
    """Draw an independent uniform subset of round(ratio * m) patches per frame."""
    if not 0 < mask_ratio < 1:
        raise InvalidMaskError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    n_mask = num_masked_for(m, mask_ratio)
    if n_mask < 1 or n_mask >= m:
        raise InvalidMaskError(f"mask_ratio {mask_ratio} masks {n_mask} of {m} patches")
    rng = np.random.default_rng(rng_seed)
    idx = np.stack([np.sort(rng.permutation(m)[:n_mask]) for _ in range(num_frames)])
    return MaskSpec(idx.astype(np.int64), float(mask_ratio), m)


def patchify_pixels(frames, patch_size):
    """(..., C, H, W) -> (..., m, p*p*C) raw pixel patches, row-major over the grid.

    Pixels inside a patch are ordered (row, col, channel).
    """
    *lead, c, h, w = frames.shape
    p = patch_size
    x = frames.reshape(*lead, c, h // p, p, w // p, p)
    nd = len(lead)
    perm = list(range(nd)) + [nd + 1, nd + 3, nd + 2, nd + 4, nd]
    x = x.permute(*perm) if isinstance(x, torch.Tensor) else x.transpose(perm)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify_pixels(patches, patch_size, in_chans, grid):
    *lead, m, _ = patches.shape
    rows, cols = grid
    p = patch_size
    x = patches.reshape(*lead, rows, cols, p, p, in_chans)
    nd = len(lead)
    x = x.permute(*range(nd), nd + 4, nd, nd + 2, nd + 1, nd + 3)
    return x.reshape(*lead, in_chans, rows * p, cols * p)


def sincos_pos_embed_2d(embed_dim, grid):
    rows, cols = grid
    gh, gw = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64),
                         indexing="ij")

    def embed_1d(dim, pos):
        omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([embed_1d(embed_dim // 2, gh), embed_1d(embed_dim // 2, gw)], axis=1)


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, C = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, L, C)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm ViT block."""

    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _as_index(mask, device):
    if isinstance(mask, MaskSpec):
        return torch.as_tensor(mask.masked_indices, device=device), torch.as_tensor(
            mask.visible_indices, device=device)
    raise TypeError(f"expected MaskSpec, got {type(mask).__name__}")


def _gather_tokens(x, idx):
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


class MaskedAutoencoder(nn.Module):
    """Patch transformer with an optional reconstruction decoder.

    All methods accept frames with arbitrary leading dimensions
    (e.g. ``(T, C, H, W)`` or ``(B, T, C, H, W)``); masks are given per frame
    in row-major order of the flattened leading dimensions.
    """

    def __init__(self, cfg: EncoderConfig, with_decoder=True):
        super().__init__()
        self.cfg = cfg.validate()
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.register_buffer("pos_embed", torch.from_numpy(
            sincos_pos_embed_2d(d, cfg.grid)).to(torch.get_default_dtype()).unsqueeze(0), persistent=False)
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)

        self.with_decoder = with_decoder
        if with_decoder:
            dd = cfg.decoder_embed_dim
            self.decoder_embed = nn.Linear(d, dd)
            self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
            self.register_buffer("decoder_pos_embed", torch.from_numpy(
                sincos_pos_embed_2d(dd, cfg.grid)).to(torch.get_default_dtype()).unsqueeze(0), persistent=False)
            self.decoder_blocks = nn.ModuleList(
                Block(dd, cfg.decoder_num_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth))
            self.decoder_norm = nn.LayerNorm(dd, eps=1e-6)
            self.decoder_pred = nn.Linear(dd, cfg.patch_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.xavier_uniform_(mod.weight)
                nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.LayerNorm):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)
        if self.with_decoder:
            nn.init.normal_(self.mask_token, std=0.02)

    def _check_frames(self, frames):
        c = self.cfg
        if frames.dim() < 3 or tuple(frames.shape[-3:]) != (c.in_chans, *c.image_size):
            raise ConfigError(f"frames of shape {tuple(frames.shape)} do not match "
                              f"(..., {c.in_chans}, {c.image_size[0]}, {c.image_size[1]})")

    def patchify(self, frames):
        """Project patches and add positions: (..., C, H, W) -> (..., m, d)."""
        self._check_frames(frames)
        x = self.patch_embed(patchify_pixels(frames, self.cfg.patch_size))
        return x + self.pos_embed.reshape(self.cfg.num_patches, -1)

    def encode(self, frames, mask: Optional[MaskSpec] = None):
        """Encode all patches, or only the visible ones when ``mask`` is given."""
        lead = frames.shape[:-3]
        x = self.patchify(frames).reshape(-1, self.cfg.num_patches, self.cfg.embed_dim)
        if mask is not None:
            if mask.num_patches != self.cfg.num_patches or len(mask.masked_indices) != x.shape[0]:
                raise ConfigError("mask does not match the patch grid or frame count")
            _, keep = _as_index(mask, x.device)
            x = _gather_tokens(x, keep)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x.reshape(*lead, x.shape[1], x.shape[2])

    def decode_reconstruct(self, latent, mask: MaskSpec):
        """Reconstruct raw pixels of the masked patches: (..., m-M, d) -> (..., M, p*p*C)."""
        if not self.with_decoder:
            raise RuntimeError("decoder was dropped from this encoder")
        lead = latent.shape[:-2]
        x = latent.reshape(-1, latent.shape[-2], latent.shape[-1])
        m = self.cfg.num_patches
        if x.shape[1] != m - mask.num_masked or len(mask.masked_indices) != x.shape[0]:
            raise ValueError(f"visible token count {x.shape[1]} does not match mask "
                             f"({m} patches, {mask.num_masked} masked)")
        masked, keep = _as_index(mask, x.device)
        x = self.decoder_embed(x)
        full = self.mask_token.expand(x.shape[0], m, -1).clone()
        full = full.scatter(1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x)
        x = full + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        x = self.decoder_pred(self.decoder_norm(x))
        x = _gather_tokens(x, masked)
        return x.reshape(*lead, x.shape[1], x.shape[2])

    def target_patches(self, frames, mask: MaskSpec):
        """Ground-truth pixels of the masked patches, aligned with decode_reconstruct."""
        p = patchify_pixels(frames, self.cfg.patch_size)
        lead = p.shape[:-2]
        p = p.reshape(-1, *p.shape[-2:])
        masked, _ = _as_index(mask, p.device)
        return _gather_tokens(p, masked).reshape(*lead, mask.num_masked, p.shape[-1])

    def forward(self, frames, mask: MaskSpec):
        from .objectives import masked_mse_loss

        recon = self.decode_reconstruct(self.encode(frames, mask), mask)
        return masked_mse_loss(recon, self.target_patches(frames, mask)), recon

    def drop_decoder(self):
        enc = MaskedAutoencoder(self.cfg, with_decoder=False).to(self.patch_embed.weight.dtype)
        enc.load_state_dict(self.encoder_state_dict())
        return enc

    def encoder_state_dict(self):
        skip = ("decoder_", "mask_token")
        return {k: v for k, v in self.state_dict().items() if not k.startswith(skip)}
