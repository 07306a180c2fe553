"""Dense -> MoTE up-cycling and expert-memory accounting."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError
from .model import INIT_STD, ModelConfig, MoTEModel
from .packing import packed_row_bytes

GIB = 2**30
SCALE_BYTES = 4

# (d_model, d_ffn, n_layers) of the public Qwen2.5 base models
PRESETS = {
    "0.5b": {"d_model": 896, "d_ffn": 4864, "n_layers": 24, "n_experts": 4},
    "1.5b": {"d_model": 1536, "d_ffn": 8960, "n_layers": 28, "n_experts": 4},
    "3b": {"d_model": 2048, "d_ffn": 11008, "n_layers": 36, "n_experts": 4},
}


def upcycle_checkpoint(
    dense: MoTEModel,
    n_experts: int = 4,
    init: str = "ffn_copy",
    routed_precision: str = "ternary",
    shared_precision: str = "full",
    seed: int = 0,
) -> MoTEModel:
    """Expand a dense model into a MoTE model.

    The dense FFN becomes the shared expert; attention, embeddings, norms and
    the LM head are copied. With ``init="ffn_copy"`` every routed expert
    starts as a bit-exact copy of the dense FFN, otherwise from N(0, 0.02).
    Routers start from N(0, 0.02). Inherited modules are frozen, except a
    ternary shared expert, which trains alongside the routed experts.
    """
    if n_experts < 1:
        raise ConfigError(f"n_experts must be >= 1, got {n_experts}")
    if init not in ("ffn_copy", "random"):
        raise ConfigError(f"unknown init {init!r}")
    if dense.cfg.is_moe:
        raise ConfigError("source model is already a MoE")

    cfg = ModelConfig.from_dict(
        {
            **dense.cfg.to_dict(),
            "n_experts": n_experts,
            "routed_precision": routed_precision,
            "shared_precision": shared_precision,
        }
    )
    moe = MoTEModel(cfg)
    missing, unexpected = moe.load_state_dict(dense.state_dict(), strict=False)
    if unexpected or any(".moe." not in k for k in missing):
        raise ConfigError(f"dense/MoTE layout mismatch: missing={missing} unexpected={unexpected}")

    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in moe.layers:
            layer.moe.router.weight.normal_(0.0, INIT_STD, generator=g)
            for expert in layer.moe.experts:
                for name in ("w_up", "w_gate", "w_down"):
                    p = getattr(expert, name)
                    if init == "ffn_copy":
                        p.copy_(getattr(layer.ffn, name))
                    else:
                        p.normal_(0.0, INIT_STD, generator=g)

    for name, p in moe.named_parameters():
        trainable = ".moe." in name or (shared_precision == "ternary" and ".ffn." in name)
        p.requires_grad_(trainable)
    return moe


def parameter_census(model: MoTEModel) -> dict[str, int]:
    frozen = sum(p.numel() for p in model.parameters() if not p.requires_grad)
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return {"frozen": frozen, "trainable": trainable, "total": frozen + trainable}


@dataclass
class MemoryReport:
    d_model: int
    d_ffn: int
    n_layers: int
    n_experts: int
    mote_bytes: int
    moe_llava_bytes: int

    @property
    def mote_gib(self) -> float:
        return round(self.mote_bytes / GIB, 1)

    @property
    def moe_llava_gib(self) -> float:
        return round(self.moe_llava_bytes / GIB, 1)

    @property
    def ratio(self) -> float:
        """Baseline over MoTE, from the displayed (one-decimal) GiB values."""
        return round(self.moe_llava_gib / self.mote_gib, 2)

    @property
    def exact_ratio(self) -> float:
        return self.moe_llava_bytes / self.mote_bytes

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "d_ffn": self.d_ffn,
            "n_layers": self.n_layers,
            "n_experts": self.n_experts,
            "mote": {"bytes": self.mote_bytes, "gib": self.mote_gib, "ratio": 1.0},
            "moe_llava_bf16": {"bytes": self.moe_llava_bytes, "gib": self.moe_llava_gib, "ratio": self.ratio},
            "exact_ratio": self.exact_ratio,
        }

    def table(self) -> str:
        return "\n".join(
            [
                f"expert memory (d_model={self.d_model}, d_ffn={self.d_ffn}, layers={self.n_layers}, E={self.n_experts})",
                f"  {'scheme':<16}{'GiB':>8}{'ratio':>9}",
                f"  {'moe_llava_bf16':<16}{self.moe_llava_gib:>8.1f}{self.ratio:>8.2f}x",
                f"  {'mote':<16}{self.mote_gib:>8.1f}{1.0:>8.2f}x",
            ]
        )


def memory_report(d_model: int, d_ffn: int, n_layers: int, n_experts: int = 4) -> MemoryReport:
    """Expert weight bytes: BF16 routed experts vs a BF16 shared expert plus INT2 routed experts."""
    if min(d_model, d_ffn, n_layers, n_experts) < 1:
        raise ConfigError("architecture dimensions must be positive")
    per_layer = 3 * d_model * d_ffn
    baseline = n_experts * n_layers * per_layer * 2
    shared = n_layers * per_layer * 2
    packed = 2 * d_ffn * packed_row_bytes(d_model) + d_model * packed_row_bytes(d_ffn)
    routed = n_experts * n_layers * (packed + 3 * SCALE_BYTES)
    return MemoryReport(d_model, d_ffn, n_layers, n_experts, shared + routed, baseline)


def memory_report_preset(name: str) -> MemoryReport:
    try:
        return memory_report(**PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
