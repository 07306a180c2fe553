"""Transformer stack with a frozen shared FFN and top-k routed ternary experts.

A block computes::

    xa  = x + Attn(Norm(x))
    out = xa + MoE(Norm'(xa)) + SharedFFN(Norm'(xa))

A dense model is the same stack with ``n_experts == 0`` (no MoE branch).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InvalidTokenError, ShapeError
from .packing import PackedTernaryMatrix, ternary_gemm_packed
from .quant import (
    fake_quant_binary,
    fake_quant_int8,
    fake_quant_ternary,
    quantize_activations_int8,
)

PRECISIONS = ("ternary", "binary", "full")
INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 352
    n_layers: int = 2
    max_seq: int = 64
    n_experts: int = 0
    top_k: int = 1
    routed_precision: str = "ternary"
    shared_precision: str = "full"
    norm: str = "rms"
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        self.validate()

    @property
    def is_moe(self) -> bool:
        return self.n_experts > 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "d_ffn", "n_layers", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.n_experts < 0:
            raise ConfigError("n_experts must be >= 0")
        if self.is_moe and not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must be in [1, {self.n_experts}], got {self.top_k}")
        if self.routed_precision not in PRECISIONS:
            raise ConfigError(f"unknown routed precision {self.routed_precision!r}")
        if self.shared_precision not in ("full", "ternary"):
            raise ConfigError(f"unknown shared precision {self.shared_precision!r}")
        if self.norm not in ("rms", "layer"):
            raise ConfigError(f"unknown norm {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def make_norm(cfg: ModelConfig) -> nn.Module:
    if cfg.norm == "rms":
        return RMSNorm(cfg.d_model, cfg.norm_eps)
    return nn.LayerNorm(cfg.d_model, eps=cfg.norm_eps)


def rotary(x: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate-half rotary embedding over the last dim of ``(B, H, T, hd)``."""
    t, hd = x.shape[-2], x.shape[-1]
    inv_freq = base ** (-torch.arange(0, hd, 2, dtype=x.dtype) / hd)
    ang = torch.arange(t, dtype=x.dtype)[:, None] * inv_freq[None, :]
    cos = torch.cat([ang.cos(), ang.cos()], dim=-1)
    sin = torch.cat([ang.sin(), ang.sin()], dim=-1)
    x1, x2 = x[..., : hd // 2], x[..., hd // 2 :]
    return x * cos + torch.cat([-x2, x1], dim=-1) * sin


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.rope_base = cfg.rope_base
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.n_heads

        def heads(y):
            return y.view(b, t, self.n_heads, hd).transpose(1, 2)

        q = rotary(heads(self.wq(x)), self.rope_base)
        k = rotary(heads(self.wk(x)), self.rope_base)
        v = heads(self.wv(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        causal = torch.ones(t, t, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        y = torch.softmax(scores, dim=-1) @ v
        return self.wo(y.transpose(1, 2).reshape(b, t, d))


class GluExpert(nn.Module):
    """SiLU-gated FFN. Weights are stored ``(out, in)`` like ``nn.Linear``.

    With ``precision`` ternary or binary and ``quant_active`` set, every
    linear applies the weight quantizer to its matrix and the per-token int8
    quantizer to its input, with straight-through gradients.
    """

    def __init__(self, d_model: int, d_ffn: int, precision: str = "full"):
        super().__init__()
        if precision not in PRECISIONS:
            raise ConfigError(f"unknown precision {precision!r}")
        self.precision = precision
        self.quant_active = True
        self.w_up = nn.Parameter(torch.empty(d_ffn, d_model))
        self.w_gate = nn.Parameter(torch.empty(d_ffn, d_model))
        self.w_down = nn.Parameter(torch.empty(d_model, d_ffn))
        # set by PTQ: name -> (int8 codes, per-row scales); weights then hold the dequantized values
        self.rtn: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def quantized(self) -> bool:
        return self.precision != "full" and self.quant_active

    def _qw(self, w: torch.Tensor) -> torch.Tensor:
        return fake_quant_ternary(w) if self.precision == "ternary" else fake_quant_binary(w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.w_up.shape[1]:
            raise ShapeError(f"expert expects width {self.w_up.shape[1]}, got {x.shape[-1]}")
        if not self.quantized:
            return F.linear(F.linear(x, self.w_up) * F.silu(F.linear(x, self.w_gate)), self.w_down)
        xq = fake_quant_int8(x)
        h = F.linear(xq, self._qw(self.w_up)) * F.silu(F.linear(xq, self._qw(self.w_gate)))
        return F.linear(fake_quant_int8(h), self._qw(self.w_down))


class PackedGluExpert(nn.Module):
    """Inference-only ternary expert backed by INT2 packed matrices."""

    precision = "ternary"
    quant_active = True

    def __init__(self, w_up: PackedTernaryMatrix, w_gate: PackedTernaryMatrix, w_down: PackedTernaryMatrix):
        super().__init__()
        if w_up.cols != w_gate.cols or (w_up.rows, w_up.cols) != (w_gate.rows, w_down.rows) or w_down.cols != w_up.rows:
            raise ShapeError("inconsistent packed expert shapes")
        self.packed = {"w_up": w_up, "w_gate": w_gate, "w_down": w_down}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead, d = x.shape[:-1], x.shape[-1]
        if d != self.packed["w_up"].cols:
            raise ShapeError(f"expert expects width {self.packed['w_up'].cols}, got {d}")
        x2 = x.detach().reshape(-1, d).double().numpy()
        if x2.shape[0] == 0:
            return x.new_zeros(*lead, self.packed["w_down"].rows)
        a = quantize_activations_int8(x2)
        up = ternary_gemm_packed(self.packed["w_up"], a)
        gate = ternary_gemm_packed(self.packed["w_gate"], a)
        h = up * (gate / (1.0 + np.exp(-gate)))
        out = ternary_gemm_packed(self.packed["w_down"], quantize_activations_int8(h))
        return torch.from_numpy(out).to(x.dtype).reshape(*lead, -1)


@dataclass
class RoutingRecord:
    """Routing for one layer: ``probs`` is ``(B, T, E)``, ``selected`` is ``(B, T, k)``."""

    probs: torch.Tensor
    selected: torch.Tensor

    @property
    def top1(self) -> torch.Tensor:
        return self.selected[..., 0]


def router_gate(logits: torch.Tensor, top_k: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax over routed experts and the top-k indices (ties go to the lowest index)."""
    z = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = z.exp()
    probs = e / e.sum(dim=-1, keepdim=True)
    selected = torch.sort(probs.detach(), dim=-1, descending=True, stable=True).indices[..., :top_k]
    return probs, selected


class MoELayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.top_k = cfg.top_k
        self.router = nn.Linear(cfg.d_model, cfg.n_experts, bias=False)
        self.experts = nn.ModuleList(
            GluExpert(cfg.d_model, cfg.d_ffn, cfg.routed_precision) for _ in range(cfg.n_experts)
        )
        self.suppressed = False

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """``x`` is ``(N, d)``; returns output ``(N, d)``, probs ``(N, E)`` and selected ``(N, k)``."""
        probs, selected = router_gate(self.router(x), self.top_k)
        out = torch.zeros_like(x)
        if self.suppressed:
            return out, probs, selected
        for i, expert in enumerate(self.experts):
            tok, slot = (selected == i).nonzero(as_tuple=True)
            if tok.numel() == 0:
                continue
            y = expert(x[tok]) * probs[tok, i].unsqueeze(-1)
            out = out.index_add(0, tok, y)
        return out, probs, selected


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = make_norm(cfg)
        self.attn = Attention(cfg)
        self.ffn_norm = make_norm(cfg)
        self.ffn = GluExpert(cfg.d_model, cfg.d_ffn, cfg.shared_precision if cfg.is_moe else "full")
        self.moe = MoELayer(cfg) if cfg.is_moe else None

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, Optional[RoutingRecord]]:
        xa = x + self.attn(self.attn_norm(x))
        h = self.ffn_norm(xa)
        shared = self.ffn(h)
        if self.moe is None:
            return xa + shared, None
        b, t, d = h.shape
        routed, probs, selected = self.moe(h.reshape(b * t, d))
        out = xa + routed.view(b, t, d) + shared
        return out, RoutingRecord(probs.view(b, t, -1), selected.view(b, t, -1))


class MoTEModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = make_norm(cfg)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def init_weights(self, generator: torch.Generator | None = None) -> "MoTEModel":
        for name, p in self.named_parameters():
            if name.endswith("norm.weight"):
                nn.init.ones_(p)
            elif name.endswith("norm.bias"):
                nn.init.zeros_(p)
            else:
                with torch.no_grad():
                    p.normal_(0.0, INIT_STD, generator=generator)
        return self

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, list[RoutingRecord]]:
        x = self.embed(tokens)
        records = []
        for layer in self.layers:
            x, rec = layer(x)
            if rec is not None:
                records.append(rec)
        return self.lm_head(self.norm(x)), records

    # --- helpers -----------------------------------------------------------

    def experts(self) -> list[nn.Module]:
        return [e for layer in self.layers if layer.moe is not None for e in layer.moe.experts]

    def set_quant_active(self, active: bool) -> None:
        for m in self.modules():
            if isinstance(m, GluExpert):
                m.quant_active = active

    def set_moe_suppressed(self, suppressed: bool) -> None:
        for layer in self.layers:
            if layer.moe is not None:
                layer.moe.suppressed = suppressed

    def frozen_names(self) -> set[str]:
        return {n for n, p in self.named_parameters() if not p.requires_grad}


def build_model(cfg: ModelConfig, seed: int = 0) -> MoTEModel:
    g = torch.Generator().manual_seed(seed)
    return MoTEModel(cfg).init_weights(g)


def lm_forward(tokens, model: MoTEModel) -> tuple[torch.Tensor, list[RoutingRecord]]:
    """Validate token ids, then run the causal LM. Returns ``(B, T, V)`` logits and per-layer routing."""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2:
        raise ShapeError(f"expected (batch, seq) token ids, got shape {tuple(tokens.shape)}")
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size):
        raise InvalidTokenError(f"token ids must lie in [0, {model.cfg.vocab_size})")
    if tokens.shape[1] > model.cfg.max_seq:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq {model.cfg.max_seq}")
    return model(tokens)
