"""Object-level fusion: dual-stream background encoding and inter-object attention.

Background object: a semantic stream (MLP over descriptors) queries a spatial
stream (MLP over raw coordinates) through cross-attention, with a residual
from the semantic stream. Operated object: descriptors only. The operated
tokens then query the background tokens and the result is mean-pooled into
one relational vector.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

from . import diffcore as dc
from .errors import HGMError


@dataclass
class FusionConfig:
    model_dim: int = 64
    heads: int = 4
    spatial_encoder_widths: tuple[int, ...] = (64,)
    semantic_encoder_widths: tuple[int, ...] = (64,)
    enable_dual_stream: bool = True
    pooling: str = "mean"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise HGMError("head-split", f"model_dim {self.model_dim} not divisible by {self.heads}")
        if self.pooling != "mean":
            raise HGMError("bad-config", f"unsupported pooling {self.pooling!r}")
        self.spatial_encoder_widths = tuple(self.spatial_encoder_widths)
        self.semantic_encoder_widths = tuple(self.semantic_encoder_widths)


@dataclass
class Instrumentation:
    """Counts forward passes through the coordinate-stream attention."""

    coord_attention_calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_coord_attention(self) -> None:
        with self._lock:
            self.coord_attention_calls += 1

    def reset(self) -> None:
        with self._lock:
            self.coord_attention_calls = 0


COUNTERS = Instrumentation()


@dataclass
class FusionModule:
    store: dc.ParameterStore
    cfg: FusionConfig
    operated_dim: int    # descriptor width incl. xyz
    background_dim: int  # descriptor width incl. xyz
    prefix: str = "fusion"
    layers: dict = field(init=False)

    def __post_init__(self):
        c, s, p = self.cfg, self.store, self.prefix
        D = c.model_dim
        L = {
            "bg_sem": dc.MLP(s, f"{p}.bg_sem", (self.background_dim, *c.semantic_encoder_widths, D)),
            "op_sem": dc.MLP(s, f"{p}.op_sem", (self.operated_dim, *c.semantic_encoder_widths, D)),
            "inter_q_norm": dc.LayerNorm(s, f"{p}.inter_q_norm", D),
            "inter_kv_norm": dc.LayerNorm(s, f"{p}.inter_kv_norm", D),
            "inter_attn": dc.CrossAttentionBlock(s, f"{p}.inter_attn", D, c.heads),
        }
        # the spatial stream only exists when enabled, so no-PE bundles carry no dead weights
        if c.enable_dual_stream:
            L["bg_spa"] = dc.MLP(s, f"{p}.bg_spa", (3, *c.spatial_encoder_widths, D))
            L["bg_q_norm"] = dc.LayerNorm(s, f"{p}.bg_q_norm", D)
            L["bg_kv_norm"] = dc.LayerNorm(s, f"{p}.bg_kv_norm", D)
            L["bg_attn"] = dc.CrossAttentionBlock(s, f"{p}.bg_attn", D, c.heads)
        self.layers = L

    def encode_background(self, descriptors, coords) -> dc.Tensor:
        descriptors, coords = dc.as_tensor(descriptors), dc.as_tensor(coords)
        if descriptors.shape[:-1] != coords.shape[:-1]:
            raise HGMError("row-mismatch", f"{descriptors.shape} vs {coords.shape}")
        L = self.layers
        sem = L["bg_sem"](descriptors)
        if not self.cfg.enable_dual_stream:
            return sem
        COUNTERS.record_coord_attention()
        spa = L["bg_spa"](coords)
        return dc.add(sem, L["bg_attn"](L["bg_q_norm"](sem), L["bg_kv_norm"](spa)))

    def encode_operated(self, descriptors) -> dc.Tensor:
        return self.layers["op_sem"](dc.as_tensor(descriptors))

    def inter_object_fuse(self, operated_tokens: dc.Tensor, background_tokens: dc.Tensor) -> dc.Tensor:
        L = self.layers
        fused = dc.add(operated_tokens,
                       L["inter_attn"](L["inter_q_norm"](operated_tokens), L["inter_kv_norm"](background_tokens)))
        return dc.mean(fused, axis=-2)

    def relational_feature(self, operated_desc, background_desc) -> dc.Tensor:
        """Descriptors (..., M, d+3) and (..., N, d+3) -> (..., model_dim)."""
        background_desc = dc.as_tensor(background_desc)
        coords = dc.Tensor(background_desc.data[..., -3:])
        bg = self.encode_background(background_desc, coords)
        op = self.encode_operated(operated_desc)
        return self.inter_object_fuse(op, bg)
