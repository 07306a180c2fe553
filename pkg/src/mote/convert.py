"""Post-training transforms: INT2 packing of routed experts and RTN of shared experts."""

from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigError
from .model import GluExpert, MoTEModel, PackedGluExpert
from .packing import pack_int2
from .quant import quantize_weights_ternary, rtn_dequantize, rtn_quantize

WEIGHTS = ("w_up", "w_gate", "w_down")


def pack_expert(expert: GluExpert) -> PackedGluExpert:
    if expert.precision != "ternary":
        raise ConfigError(f"only ternary experts can be packed, got {expert.precision}")
    mats = {}
    for name in WEIGHTS:
        q = quantize_weights_ternary(getattr(expert, name).detach().float().numpy())
        mats[name] = pack_int2(q.codes, q.scale)
    return PackedGluExpert(**mats)


def pack_model(model: MoTEModel) -> MoTEModel:
    """Replace every latent ternary routed expert with its INT2 packed form, in place."""
    if not model.cfg.is_moe:
        raise ConfigError("dense models have no routed experts to pack")
    for layer in model.layers:
        experts = layer.moe.experts
        for i, e in enumerate(experts):
            if isinstance(e, GluExpert):
                experts[i] = pack_expert(e)
    return model


def rtn_expert(expert: GluExpert, bits: int) -> dict[str, float]:
    """Weight-only RTN of one FFN. Returns the max relative bound slack per matrix."""
    slack = {}
    for name in WEIGHTS:
        p = getattr(expert, name)
        # codes chosen and the bound checked in float64 against the float32 scales that get stored
        w = p.detach().double().numpy()
        codes, scales = rtn_quantize(w, bits, scale_dtype=np.float32)
        exact = scales.astype(np.float64)
        slack[name] = float(np.max(np.abs(w - rtn_dequantize(codes, exact)) / (exact[:, None] / 2)))
        # float32 product, the same expression the checkpoint loader evaluates
        deq = rtn_dequantize(codes, scales)
        expert.rtn[name] = (codes, scales)
        with torch.no_grad():
            p.copy_(torch.from_numpy(deq))
    return slack


def ptq_shared(model: MoTEModel, bits: int = 8) -> dict[str, dict[str, float]]:
    """RTN-quantize every shared expert in place; returns per-tensor bound slack (<= 1 holds)."""
    return {f"layers.{i}.ffn": rtn_expert(layer.ffn, bits) for i, layer in enumerate(model.layers)}
