"""Minimal vision transformer exposing per-head class-token attention maps.

Module and parameter names follow the self-supervised DINO reference layout
(cls_token, pos_embed, patch_embed.proj, blocks.N.attn.qkv, ...) so official
checkpoints load directly via load_state_dict. Without a weights file the
model can be seeded randomly, which yields format-valid but uninformative
features; use that only for smoke testing.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

ARCHS = {
    "vit_tiny_16": dict(patch_size=16, embed_dim=192, depth=12, num_heads=3),
    "vit_small_16": dict(patch_size=16, embed_dim=384, depth=12, num_heads=6),
    "vit_small_8": dict(patch_size=8, embed_dim=384, depth=12, num_heads=6),
    "vit_base_16": dict(patch_size=16, embed_dim=768, depth=12, num_heads=12),
}


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attention=False):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        if return_attention:
            return out, attn
        return out


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, return_attention=False):
        if return_attention:
            y, attn = self.attn(self.norm1(x), return_attention=True)
            x = x + y
            x = x + self.mlp(self.norm2(x))
            return x, attn
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, embed_dim):
        super().__init__()
        self.proj = nn.Conv2d(3, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class MiniViT(nn.Module):
    def __init__(self, patch_size=16, embed_dim=384, depth=12, num_heads=6, image_size=224):
        super().__init__()
        self.patch_size = patch_size
        self.num_heads = num_heads
        grid = image_size // patch_size
        self.patch_embed = PatchEmbed(patch_size, embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + grid * grid, embed_dim))
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def _pos_embed_for(self, grid_h, grid_w):
        stored = self.pos_embed.shape[1] - 1
        if stored == grid_h * grid_w:
            return self.pos_embed
        side = int(math.sqrt(stored))
        patch_pos = self.pos_embed[:, 1:].reshape(1, side, side, -1).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(grid_h, grid_w), mode="bicubic", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, -1)
        return torch.cat([self.pos_embed[:, :1], patch_pos], dim=1)

    def cls_attention(self, x: torch.Tensor, layer: int = -1) -> torch.Tensor:
        """Class-token attention over patch tokens at the selected block.

        x: (B, 3, H, W) with H, W multiples of patch_size.
        Returns (B, num_heads, H/p, W/p).
        """
        b, _, h, w = x.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"input {h}x{w} not a multiple of patch size {self.patch_size}")
        gh, gw = h // self.patch_size, w // self.patch_size
        tokens = self.patch_embed(x)
        cls = self.cls_token.expand(b, -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self._pos_embed_for(gh, gw)

        layer = layer % len(self.blocks)
        attn = None
        for i, block in enumerate(self.blocks):
            if i == layer:
                tokens, attn = block(tokens, return_attention=True)
            else:
                tokens = block(tokens)
        # attention of the class token onto the patch tokens
        return attn[:, :, 0, 1:].reshape(b, self.num_heads, gh, gw)


def build_model(arch: str, weights_path=None, seed: int = 0, image_size: int = 224) -> MiniViT:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHS)}")
    torch.manual_seed(seed)
    model = MiniViT(image_size=image_size, **ARCHS[arch])
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        state = {k.replace("module.", ""): v for k, v in state.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        core_missing = [k for k in missing if not k.startswith("pos_embed")]
        if core_missing:
            raise ValueError(f"checkpoint is missing parameters: {core_missing[:6]}")
    model.eval()
    return model


def preprocess_image(rgb01, image_size: int, device="cpu") -> torch.Tensor:
    """Float [0,1] H×W×3 array to a normalized, resized (1,3,S,S) tensor."""
    x = torch.from_numpy(rgb01.transpose(2, 0, 1)).float().unsqueeze(0)
    x = F.interpolate(x, size=(image_size, image_size), mode="bilinear", align_corners=False)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return ((x - mean) / std).to(device)
