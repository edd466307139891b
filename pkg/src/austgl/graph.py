"""AU-specific features, spatial KNN graph + GCN, temporal transformer, SC head.

Node features are laid out ``(..., N, T, d)``: N AUs, T frames, width d.
Adjacency is ``(..., T, N, N)`` with entry ``[t, i, j]`` set when AU ``j`` is
one of the ``k`` neighbours of AU ``i`` in frame ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import AU_NAMES
from .encoder import ConfigError, EncoderConfig, MaskedAutoencoder

SC_EPS = 1e-8


@dataclass
class STGLConfig:
    num_blocks: int = 3
    k: int = 4
    heads: int = 1
    use_spatial: bool = True
    use_temporal: bool = True
    dynamic_graph: bool = True
    temporal_positional: bool = False
    similarity: str = "dot"
    max_len: int = 16

    def validate(self, num_aus=None, dim=None):
        if not (self.use_spatial or self.use_temporal):
            raise ConfigError("STGL needs at least one of the spatial and temporal branches")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if num_aus is not None and self.use_spatial and not 1 <= self.k <= num_aus - 1:
            raise ConfigError(f"k={self.k} must lie in [1, {num_aus - 1}]")
        if dim is not None and dim % self.heads:
            raise ConfigError(f"width {dim} is not divisible by {self.heads} heads")
        if self.similarity not in ("dot", "cosine"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        return self


class AUFeatureGenerator(nn.Module):
    """N independent FC branches, each followed by global average pooling over patches."""

    def __init__(self, num_aus, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_aus, dim, dim))
        self.bias = nn.Parameter(torch.zeros(num_aus, dim))
        bound = 1 / math.sqrt(dim)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, tokens):
        # (..., T, m, d) -> (..., N, T, d). The FC is affine, so pooling first
        # gives the same result N times cheaper.
        pooled = tokens.mean(dim=-2)
        out = torch.einsum("...td,ned->...nte", pooled, self.weight)
        return out + self.bias.unsqueeze(-2)


def similarity_matrix(nodes, similarity="dot"):
    x = nodes.transpose(-3, -2)  # (..., T, N, d)
    if similarity == "cosine":
        x = F.normalize(x, dim=-1)
    return x @ x.transpose(-2, -1)


@torch.no_grad()
def build_knn_graph(nodes, k, similarity="dot"):
    """Directed KNN adjacency per frame; ties go to the lower AU index."""
    n = nodes.shape[-3]
    if not 1 <= k <= n - 1:
        raise ConfigError(f"k={k} must lie in [1, {n - 1}]")
    sim = similarity_matrix(nodes, similarity)
    eye = torch.eye(n, dtype=torch.bool, device=sim.device)
    sim = sim.masked_fill(eye, float("-inf"))
    # stable descending sort keeps lower indices first among equal scores
    order = torch.sort(sim, dim=-1, descending=True, stable=True).indices[..., :k]
    adj = torch.zeros(sim.shape, dtype=torch.bool, device=sim.device)
    return adj.scatter_(-1, order, True)


class SpatialGCN(nn.Module):
    """v_i <- ReLU(v_i + W_g * mean_{j in knn(i)} W_r v_j), independently per frame."""

    def __init__(self, dim):
        super().__init__()
        self.w_r = nn.Linear(dim, dim, bias=False)
        self.w_g = nn.Linear(dim, dim, bias=False)

    def forward(self, nodes, adjacency, k):
        msg = self.w_r(nodes).transpose(-3, -2)  # (..., T, N, d)
        agg = (adjacency.to(msg.dtype) @ msg) / k
        return F.relu(nodes + self.w_g(agg).transpose(-3, -2))


class TemporalTransformer(nn.Module):
    """Self-attention over the T frames of each AU sequence, then a post-norm FFN residual.

    ``valid_mask`` (``(..., T)``) removes padded frames from the attention keys
    so real frames never attend to padding.
    """

    def __init__(self, dim, heads=1, positional=False, max_len=16):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)
        self.norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 4 * dim), nn.ReLU(), nn.Linear(4 * dim, dim))
        self.pos = nn.Parameter(torch.zeros(max_len, dim)) if positional else None
        if positional:
            nn.init.normal_(self.pos, std=0.02)

    def attend(self, x, valid_mask=None):
        *lead, T, d = x.shape
        h = self.heads

        def split(t):
            return t.reshape(*lead, T, h, d // h).transpose(-3, -2)

        q, k, v = split(self.w_q(x)), split(self.w_k(x)), split(self.w_v(x))
        logits = (q @ k.transpose(-2, -1)) * self.scale  # (..., h, T, T)
        if valid_mask is not None:
            # (B, T) -> (B, 1[N], 1[head], 1[query], T)
            keymask = valid_mask[..., None, None, None, :]
            logits = logits.masked_fill(~keymask, float("-inf"))
        out = logits.softmax(dim=-1) @ v
        return self.w_o(out.transpose(-3, -2).reshape(*lead, T, d))

    def forward(self, nodes, valid_mask=None):
        x = nodes
        if self.pos is not None:
            x = x + self.pos[: x.shape[-2]]
        z = x + self.attend(x, valid_mask)
        return z + self.ffn(self.norm(z))


class STGLBlock(nn.Module):
    def __init__(self, dim, cfg: STGLConfig):
        super().__init__()
        self.spatial = SpatialGCN(dim) if cfg.use_spatial else None
        self.temporal = (TemporalTransformer(dim, cfg.heads, cfg.temporal_positional, cfg.max_len)
                         if cfg.use_temporal else None)


class STGL(nn.Module):
    """Stack of spatio-temporal graph learning blocks."""

    def __init__(self, num_aus, dim, cfg: STGLConfig):
        super().__init__()
        self.cfg = cfg.validate(num_aus, dim)
        self.blocks = nn.ModuleList(STGLBlock(dim, cfg) for _ in range(cfg.num_blocks))

    def forward(self, nodes, valid_mask=None, return_graphs=False):
        cfg = self.cfg
        graphs = []
        adj = None
        if cfg.use_spatial and not cfg.dynamic_graph:
            adj = build_knn_graph(nodes, cfg.k, cfg.similarity)
        for blk in self.blocks:
            if blk.spatial is not None:
                if cfg.dynamic_graph:
                    adj = build_knn_graph(nodes, cfg.k, cfg.similarity)
                graphs.append(adj)
                nodes = blk.spatial(nodes, adj, cfg.k)
            if blk.temporal is not None:
                nodes = blk.temporal(nodes, valid_mask)
        return (nodes, graphs) if return_graphs else nodes


def sc_scores(nodes, anchors, eps=SC_EPS):
    """Cosine similarity of ReLU'd node features with ReLU'd per-AU anchors.

    nodes ``(..., N, T, d)``, anchors ``(N, d)`` -> scores ``(..., T, N)`` in [0, 1].
    """
    v = F.relu(nodes)
    s = F.relu(anchors).unsqueeze(-2)  # (N, 1, d)
    num = (v * s).sum(-1)
    den = v.norm(dim=-1) * s.norm(dim=-1) + eps
    return (num / den).transpose(-2, -1)


class SCHead(nn.Module):
    def __init__(self, num_aus, dim):
        super().__init__()
        self.anchors = nn.Parameter(torch.empty(num_aus, dim))
        nn.init.xavier_uniform_(self.anchors)

    def forward(self, nodes):
        return sc_scores(nodes, self.anchors)


class AUDetector(nn.Module):
    """Encoder -> AU feature generator -> STGL stack -> SC head.

    ``stgl_cfg=None`` bypasses graph learning entirely (plain baseline).
    """

    def __init__(self, enc_cfg: EncoderConfig, stgl_cfg: STGLConfig | None, num_aus=len(AU_NAMES),
                 encoder: MaskedAutoencoder | None = None):
        super().__init__()
        self.num_aus = num_aus
        self.encoder = encoder if encoder is not None else MaskedAutoencoder(enc_cfg, with_decoder=False)
        if self.encoder.with_decoder:
            self.encoder = self.encoder.drop_decoder()
        d = enc_cfg.embed_dim
        self.afg = AUFeatureGenerator(num_aus, d)
        self.stgl = STGL(num_aus, d, stgl_cfg) if stgl_cfg is not None else None
        self.head = SCHead(num_aus, d)

    def node_features(self, frames, valid_mask=None):
        nodes = self.afg(self.encoder.encode(frames))
        if self.stgl is not None:
            nodes = self.stgl(nodes, valid_mask)
        return nodes

    def forward(self, frames, valid_mask=None):
        """frames ``(B, T, C, H, W)``, valid_mask ``(B, T)`` -> scores ``(B, T, N)``."""
        return self.head(self.node_features(frames, valid_mask))
