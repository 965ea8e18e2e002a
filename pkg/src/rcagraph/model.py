"""Spatio-temporal scorer: Transformer over time, weighted GAT over services, MLP head.

Tensor layout throughout is batch-first: windows are (B, V, T, F), graphs are
(B, V, V) with entry [i, j] describing the message from service j to i.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import NonFinite, ShapeMismatch, UnknownService
from .types import AlignedWindow, CallGraphSnapshot

POOLING = ("mean", "last", "max")


@dataclass
class ModelConfig:
    n_features: int = 0
    d_temp: int = 32
    n_heads: int = 4
    n_transformer_layers: int = 2
    d_ff: int = 64
    n_gat_layers: int = 2
    d_spat: int = 32
    mlp_hidden: int = 32
    dropout: float = 0.1
    pooling: str = "mean"
    positional_encoding: bool = True
    seed: int = 0

    def __post_init__(self):
        dims = dict(d_temp=self.d_temp, n_heads=self.n_heads, d_ff=self.d_ff, d_spat=self.d_spat,
                    mlp_hidden=self.mlp_hidden, n_transformer_layers=self.n_transformer_layers,
                    n_gat_layers=self.n_gat_layers)
        for k, v in dims.items():
            if int(v) < 1:
                raise ValueError(f"{k} must be >= 1, got {v}")
        if self.d_temp % self.n_heads:
            raise ValueError(f"d_temp={self.d_temp} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}")

    @property
    def d_k(self) -> int:
        return self.d_temp // self.n_heads

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ServiceEmbeddings:
    temporal: torch.Tensor        # (..., V, d_temp)
    spatiotemporal: torch.Tensor  # (..., V, d_spat)
    logits: torch.Tensor          # (..., V)
    scores: torch.Tensor          # (..., V)
    temporal_attention: list = field(default_factory=list)
    spatial_attention: list = field(default_factory=list)


def _uniform_fan_in(t: torch.Tensor, fan_in: int):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound)


class Linear(nn.Linear):
    def reset_parameters(self):
        _uniform_fan_in(self.weight, self.in_features)
        if self.bias is not None:
            _uniform_fan_in(self.bias, self.in_features)


def sinusoidal_encoding(T: int, d: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(T, dtype=dtype)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=dtype) * (-math.log(10000.0) / d))
    pe = torch.zeros(T, d, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product attention over the time axis."""

    def __init__(self, d_model, n_heads, dropout):
        super().__init__()
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        self.W_Q = Linear(d_model, d_model, bias=False)
        self.W_K = Linear(d_model, d_model, bias=False)
        self.W_V = Linear(d_model, d_model, bias=False)
        self.W_O = Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        *lead, T, d = x.shape

        def heads(t):
            return t.reshape(*lead, T, self.n_heads, self.d_k).transpose(-3, -2)

        q, k, v = heads(self.W_Q(x)), heads(self.W_K(x)), heads(self.W_V(x))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_k), dim=-1)
        out = self.drop(att) @ v
        out = out.transpose(-3, -2).reshape(*lead, T, d)
        return self.W_O(out), att


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout):
        super().__init__()
        self.attn = SelfAttention(d_model, n_heads, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff1 = Linear(d_model, d_ff)
        self.ff2 = Linear(d_ff, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        a, att = self.attn(x)
        x = self.norm1(x + self.drop(a))
        f = self.ff2(self.drop(F.relu(self.ff1(x))))
        return self.norm2(x + self.drop(f)), att


class TemporalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = Linear(cfg.n_features, cfg.d_temp)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d_temp, cfg.n_heads, cfg.d_ff, cfg.dropout)
            for _ in range(cfg.n_transformer_layers)
        )

    def forward(self, x):
        """(..., T, F) -> pooled (..., d_temp) plus per-layer attention maps."""
        h = self.input_proj(x)
        if self.cfg.positional_encoding:
            h = h + sinusoidal_encoding(h.shape[-2], h.shape[-1], h.dtype)
        maps = []
        for layer in self.layers:
            h, att = layer(h)
            maps.append(att)
        if self.cfg.pooling == "mean":
            out = h.mean(dim=-2)
        elif self.cfg.pooling == "last":
            out = h[..., -1, :]
        else:
            out = h.max(dim=-2).values
        return out, maps


class HGATLayer(nn.Module):
    """Single-head graph attention whose messages are additionally scaled by edge weights."""

    def __init__(self, d_in, d_out, dropout, negative_slope=0.2):
        super().__init__()
        self.W = Linear(d_in, d_out, bias=False)
        self.a = nn.Parameter(torch.empty(2 * d_out))
        _uniform_fan_in(self.a, 2 * d_out)
        self.d_out = d_out
        self.negative_slope = negative_slope
        self.drop = nn.Dropout(dropout)

    def attention(self, z, mask):
        src = z @ self.a[: self.d_out]   # contribution of the receiving node i
        dst = z @ self.a[self.d_out:]    # contribution of the neighbour j
        e = F.leaky_relu(src[..., :, None] + dst[..., None, :], self.negative_slope)
        e = e.masked_fill(~mask, float("-inf"))
        return torch.softmax(e, dim=-1)

    def forward(self, h, prop, mask):
        z = self.W(h)
        alpha = self.attention(z, mask)
        msg = (self.drop(alpha) * prop) @ z
        return msg, alpha


def propagation_matrix(weights, *, unit: bool = False):
    """Neighbourhood weights for message passing from a caller->callee weight matrix.

    ``weights[..., a, b]`` is the weight of edge a->b (0 = no edge). Node i
    receives from callers (in-edges), from callees (reversed out-edges, same
    weight) and from itself with weight 1. When both directions exist the
    larger weight is used. ``unit=True`` replaces every weight by 1.
    Returns ``(prop, mask)`` with ``prop[..., i, j]`` the weight of j -> i.
    """
    w = torch.as_tensor(weights)
    prop = torch.maximum(w, w.transpose(-1, -2))
    eye = torch.eye(w.shape[-1], dtype=torch.bool)
    mask = (prop > 0) | eye
    prop = torch.where(eye, torch.ones_like(prop), prop)
    if unit:
        prop = mask.to(w.dtype)
    return prop, mask


class RCAModel(nn.Module):
    def __init__(self, cfg: ModelConfig, dtype=torch.float64):
        super().__init__()
        if cfg.n_features < 1:
            raise ValueError("ModelConfig.n_features must be set before building the model")
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.temporal = TemporalEncoder(cfg)
        dims = [cfg.d_temp] + [cfg.d_spat] * cfg.n_gat_layers
        self.gat = nn.ModuleList(
            HGATLayer(dims[k], dims[k + 1], cfg.dropout) for k in range(cfg.n_gat_layers)
        )
        self.W_1 = Linear(cfg.d_spat, cfg.mlp_hidden)
        self.W_2 = Linear(cfg.mlp_hidden, 1)
        self.to(dtype)

    @property
    def dtype(self):
        return self.W_1.weight.dtype

    def encode_temporal(self, x, return_attention=False):
        """(..., V, T, F) -> (..., V, d_temp); services are encoded independently."""
        if x.shape[-1] != self.cfg.n_features or x.dim() < 3:
            raise ShapeMismatch(f"expected (..., V, T, {self.cfg.n_features}), got {tuple(x.shape)}")
        h, maps = self.temporal(x)
        if not torch.isfinite(h).all():
            raise NonFinite("temporal encoder produced non-finite values")
        return (h, maps) if return_attention else h

    def hgat_forward(self, h, prop, mask, return_attention=False):
        if h.shape[-1] != self.cfg.d_temp:
            raise ShapeMismatch(f"expected temporal dim {self.cfg.d_temp}, got {h.shape[-1]}")
        v = h.shape[-2]
        if prop.shape[-2:] != (v, v) or mask.shape[-2:] != (v, v):
            raise ShapeMismatch("graph does not match the number of services")
        maps = []
        for k, layer in enumerate(self.gat):
            h, alpha = layer(h, prop, mask)
            if k < len(self.gat) - 1:
                h = F.elu(h)
            maps.append(alpha)
        return (h, maps) if return_attention else h

    def score(self, hs):
        if hs.shape[-1] != self.cfg.d_spat:
            raise ShapeMismatch(f"expected spatial dim {self.cfg.d_spat}, got {hs.shape[-1]}")
        logits = self.W_2(F.relu(self.W_1(hs))).squeeze(-1)
        return logits, torch.sigmoid(logits)

    def forward(self, x, prop, mask) -> ServiceEmbeddings:
        ht, tmaps = self.encode_temporal(x, return_attention=True)
        hs, smaps = self.hgat_forward(ht, prop, mask, return_attention=True)
        logits, scores = self.score(hs)
        return ServiceEmbeddings(ht, hs, logits, scores, tmaps, smaps)

    def forward_window(self, window: AlignedWindow, snapshot: CallGraphSnapshot,
                       unit_weights: bool = False) -> ServiceEmbeddings:
        """Evaluation-mode convenience wrapper over numpy-backed inputs."""
        if window.n_services != len(snapshot.services):
            raise UnknownService("snapshot and window cover different service sets")
        x = torch.as_tensor(window.features, dtype=self.dtype)
        prop, mask = propagation_matrix(torch.as_tensor(snapshot.weight_matrix(), dtype=self.dtype),
                                        unit=unit_weights)
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return self.forward(x, prop, mask)
        finally:
            self.train(was_training)

    # -- (de)serialisation --------------------------------------------------------

    def params_json(self) -> dict:
        return {
            k: {"shape": list(v.shape), "data": v.detach().cpu().double().reshape(-1).tolist()}
            for k, v in self.state_dict().items()
        }

    def load_params_json(self, obj):
        state = {
            k: torch.tensor(np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]), dtype=self.dtype)
            for k, v in obj.items()
        }
        self.load_state_dict(state)
