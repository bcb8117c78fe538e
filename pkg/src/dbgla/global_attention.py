"""Area tokens and attention across the whole scene.

Each nonempty area becomes one token: its centroid and the sum over member
points of ``[feature, Linear_enc(point - centroid)]``. Tokens attend to every
other token with a learned bias on centroid differences, and the updated
token is projected back to the feature width and copied to every member
point.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .local_attention import AttentionParams, FeedForward, MhsaConfig, attend


@dataclass
class AreaTokens:
    area_ids: np.ndarray  # (A,)
    centroids: np.ndarray  # (A, 3)
    features: T.Tensor  # (A, fea + enc)

    def __len__(self):
        return len(self.area_ids)


def area_centroids(positions, grid):
    counts = grid.counts().astype(np.float64)
    sums = np.zeros((grid.num_areas, 3))
    np.add.at(sums, grid.area_of_point, positions)
    return sums / counts[:, None]


def aggregate_areas(positions, grid, features, enc_layer):
    """Centroid and summed ``[f, enc(p - centroid)]`` for every nonempty area."""
    features = T.as_tensor(features)
    positions = np.asarray(positions, dtype=np.float64)
    if features.shape[0] != len(positions):
        raise ShapeError(f"features have {features.shape[0]} rows for {len(positions)} points")
    centroids = area_centroids(positions, grid)
    rel = positions - centroids[grid.area_of_point]
    per_point = T.concat([features, enc_layer(rel)], axis=-1)
    tokens = T.segment_sum(per_point, grid.area_of_point, grid.num_areas)
    return AreaTokens(np.arange(grid.num_areas), centroids, tokens)


class GlobalBlock(T.Module):
    """Token normalisation, then a pre-norm attention + FFN residual block."""

    def __init__(self, cfg, rng, use_position_bias=True):
        cfg.validate()
        c = cfg.channels
        self.cfg = cfg
        self.token_norm = T.LayerNorm(c)
        self.norm1 = T.LayerNorm(c)
        self.attn = AttentionParams(c, rng)
        self.rel_bias = T.LinearLayer(3, cfg.num_heads, rng) if use_position_bias else None
        self.norm2 = T.LayerNorm(c)
        self.ffn = FeedForward(c, cfg.ffn_expansion, rng)


def global_mhsa(tokens, block, return_weights=False):
    """Every token attends to every token; returns updated (A, C) features."""
    feats = tokens.features
    if feats.shape[1] != block.cfg.channels:
        raise ShapeError(f"tokens have {feats.shape[1]} channels, block expects {block.cfg.channels}")
    a = feats.shape[0]
    t = block.token_norm(feats)
    h = T.reshape(block.norm1(t), (1, a, feats.shape[1]))
    bias = None
    if block.rel_bias is not None:
        diff = tokens.centroids[:, None, :] - tokens.centroids[None, :, :]
        bias = T.reshape(T.transpose(block.rel_bias(diff), (2, 0, 1)), (1, block.cfg.num_heads, a, a))
    res = attend(h, h, block.attn, block.cfg.num_heads, block.cfg.scale(), bias, return_weights)
    out, weights = res if return_weights else (res, None)
    y = T.add(t, T.reshape(out, (a, feats.shape[1])))
    z = T.add(y, block.ffn(block.norm2(y)))
    return (z, weights) if return_weights else z


def redistribute(token_features, grid, proj):
    """Per-point features: the projected token of the point's area."""
    token_features = T.as_tensor(token_features)
    if token_features.shape[0] != grid.num_areas:
        raise ConfigError(f"{token_features.shape[0]} tokens for {grid.num_areas} areas")
    return T.take(proj(token_features), grid.area_of_point)


def fuse(local_features, global_features, fusion):
    """``local + Linear([local, global])``."""
    if local_features.shape != global_features.shape:
        raise ShapeError(f"cannot fuse {local_features.shape} with {global_features.shape}")
    return T.add(local_features, fusion(T.concat([local_features, global_features], axis=-1)))


class GlobalPath(T.Module):
    """Aggregate -> attend -> redistribute for one network stage."""

    def __init__(self, width, enc_dim, head_dim, rng, use_position_bias=True, ffn_expansion=4):
        if (width + enc_dim) % head_dim:
            raise ConfigError(f"width {width} + enc {enc_dim} not divisible by head_dim {head_dim}")
        cfg = MhsaConfig(num_heads=(width + enc_dim) // head_dim, head_dim=head_dim, ffn_expansion=ffn_expansion)
        self.enc = T.LinearLayer(3, enc_dim, rng)
        self.block = GlobalBlock(cfg, rng, use_position_bias)
        self.proj = T.LinearLayer(width + enc_dim, width, rng)

    def __call__(self, positions, grid, features):
        tokens = aggregate_areas(positions, grid, features, self.enc)
        return redistribute(global_mhsa(tokens, self.block), grid, self.proj)
