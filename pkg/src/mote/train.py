"""Quantization-aware training for up-cycled models, plus dense pretraining."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, EmptyResponseError, TrainingDivergedError
from .model import MoTEModel, RoutingRecord, lm_forward
from .synthdata import BatchExample, collate

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.01


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 2000
    gamma: float = DEFAULT_GAMMA
    weight_decay: float = 0.1
    decay_until: float = 0.5  # weight decay drops to 0 at this fraction of steps
    ternary_fraction: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if not 0.0 <= self.ternary_fraction <= 1.0:
            raise ConfigError("ternary_fraction must be in [0, 1]")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("lr, batch_size and steps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @staticmethod
    def _boundary(fraction: float, steps: int) -> int:
        # first step index at or past fraction * steps, immune to float noise like 0.4 * 300
        return math.ceil(round(fraction * steps, 9))

    def quant_active(self, step: int) -> bool:
        return step >= self._boundary(1.0 - self.ternary_fraction, self.steps)

    def decay_at(self, step: int) -> float:
        return self.weight_decay if step < self._boundary(self.decay_until, self.steps) else 0.0


# --- objectives --------------------------------------------------------------


def lm_loss(logits: torch.Tensor, tokens, loss_mask) -> torch.Tensor:
    """Mean next-token NLL over answer positions.

    ``loss_mask[b, i]`` marks answer tokens; token ``i`` is predicted from the
    logits at ``i - 1``. Positions outside the mask contribute nothing.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    if tokens.ndim == 1:
        tokens, mask = tokens[None], mask[None]
    if logits.ndim == 2:
        logits = logits[None]
    target_mask = mask[:, 1:]
    if not target_mask.any():
        raise EmptyResponseError("batch has no answer tokens to score")
    logp = torch.log_softmax(logits[:, :-1], dim=-1)
    nll = -logp.gather(-1, tokens[:, 1:, None]).squeeze(-1)
    return nll[target_mask].mean()


def balance_loss(records: Iterable[RoutingRecord], token_mask=None) -> torch.Tensor:
    """Switch-style load balance ``E * sum_i f_i * mean_P_i``, averaged over layers.

    ``f_i`` is the share of tokens whose top-1 expert is ``i``; ``mean_P_i`` is
    the mean gate probability. Tokens outside ``token_mask`` are ignored.
    """
    losses = []
    for rec in records:
        e = rec.probs.shape[-1]
        probs = rec.probs.reshape(-1, e)
        top1 = rec.top1.reshape(-1)
        if token_mask is not None:
            keep = torch.as_tensor(token_mask, dtype=torch.bool).reshape(-1)
            probs, top1 = probs[keep], top1[keep]
        if probs.shape[0] == 0:
            raise EmptyResponseError("balance loss needs at least one token")
        frac = torch.bincount(top1, minlength=e).to(probs.dtype) / probs.shape[0]
        losses.append(e * (frac * probs.mean(dim=0)).sum())
    if not losses:
        return torch.zeros(())
    return torch.stack(losses).mean()


def total_loss(lm, balance, gamma: float):
    return lm + gamma * balance


def expert_loads(records: Iterable[RoutingRecord], token_mask=None) -> list[list[float]]:
    """Per layer, the share of (masked) tokens whose top-1 expert is each index."""
    out = []
    for rec in records:
        e = rec.probs.shape[-1]
        top1 = rec.top1.reshape(-1)
        if token_mask is not None:
            top1 = top1[torch.as_tensor(token_mask, dtype=torch.bool).reshape(-1)]
        counts = torch.bincount(top1, minlength=e).double()
        out.append((counts / max(1, top1.numel())).tolist())
    return out


def backward_ste(loss: torch.Tensor, model: MoTEModel) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss``; quantizers pass gradients straight through.

    Returns the gradients of all trainable parameters.
    """
    loss.backward()
    return {n: p.grad for n, p in model.named_parameters() if p.requires_grad and p.grad is not None}


# --- trainer -------------------------------------------------------------------


def _decayed(name: str) -> bool:
    return ".moe." in name


class Trainer:
    """Owns a model and an AdamW optimizer over its trainable parameters.

    Weight decay (with the two-stage schedule) applies to routed experts and
    routers only. Frozen parameters are never handed to the optimizer.
    """

    def __init__(self, model: MoTEModel, cfg: TrainConfig, data: list[BatchExample],
                 metrics_sink: Optional[Callable[[dict], None]] = None):
        if not data:
            raise ConfigError("training data is empty")
        self.model = model
        self.cfg = cfg
        self.data = data
        self.sink = metrics_sink
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        if not named:
            raise ConfigError("model has no trainable parameters")
        self.decay_group = {"params": [p for n, p in named if _decayed(n)], "weight_decay": cfg.decay_at(0), "decayed": True}
        self.plain_group = {"params": [p for n, p in named if not _decayed(n)], "weight_decay": 0.0, "decayed": False}
        groups = [g for g in (self.decay_group, self.plain_group) if g["params"]]
        self.opt = torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
        self.step_index = 0

    def sample(self) -> list[BatchExample]:
        idx = self.rng.integers(len(self.data), size=self.cfg.batch_size)
        return [self.data[i] for i in idx]

    def train_step(self, batch: list[BatchExample] | None = None) -> dict:
        cfg, model, step = self.cfg, self.model, self.step_index
        batch = batch if batch is not None else self.sample()
        arrays = collate(batch)
        quant_on = cfg.quant_active(step)
        model.set_quant_active(quant_on)
        for g in self.opt.param_groups:
            if g.get("decayed"):
                g["weight_decay"] = cfg.decay_at(step)
        model.train()
        self.opt.zero_grad(set_to_none=True)
        logits, records = lm_forward(arrays["tokens"], model)
        lm = lm_loss(logits, arrays["tokens"], arrays["loss_mask"])
        bal = balance_loss(records, arrays["valid"]) if records else torch.zeros(())
        loss = total_loss(lm, bal, cfg.gamma)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: lm={lm.item()} balance={bal.item()} quant={quant_on}"
            )
        backward_ste(loss, model)
        grad_norm = torch.nn.utils.clip_grad_norm_(
            [p for g in self.opt.param_groups for p in g["params"]], cfg.grad_clip
        )
        self.opt.step()
        self.step_index += 1
        metrics = {
            "step": step,
            "lm_loss": lm.item(),
            "balance_loss": bal.item(),
            "total": loss.item(),
            "grad_norm": float(grad_norm),
            "quant_active": quant_on,
            "weight_decay": cfg.decay_at(step),
            "expert_loads": expert_loads(records, arrays["valid"]),
        }
        if self.sink is not None:
            self.sink(metrics)
        return metrics

    def run(self, steps: int | None = None, log_every: int = 100) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        history = []
        for _ in range(steps):
            m = self.train_step()
            history.append(m)
            if log_every and m["step"] % log_every == 0:
                log.info("step %d lm=%.4f bal=%.4f", m["step"], m["lm_loss"], m["balance_loss"])
        self.model.set_quant_active(True)
        return history


def train_step(model: MoTEModel, batch: list[BatchExample], trainer: Trainer) -> dict:
    """One optimizer update of ``trainer``'s model on ``batch``."""
    if trainer.model is not model:
        raise ConfigError("trainer does not own this model")
    return trainer.train_step(batch)


@torch.no_grad()
def evaluate(model: MoTEModel, data: list[BatchExample], batch_size: int = 64) -> dict:
    """Token-weighted mean answer NLL and routing records over ``data``."""
    model.eval()
    total, count = 0.0, 0
    loads_acc = None
    n_valid = 0
    for i in range(0, len(data), batch_size):
        arrays = collate(data[i : i + batch_size])
        logits, records = lm_forward(arrays["tokens"], model)
        n = int(arrays["loss_mask"][:, 1:].sum())
        total += lm_loss(logits, arrays["tokens"], arrays["loss_mask"]).item() * n
        count += n
        if records:
            v = int(arrays["valid"].sum())
            loads = np.array(expert_loads(records, arrays["valid"])) * v
            loads_acc = loads if loads_acc is None else loads_acc + loads
            n_valid += v
    loss = total / count
    out = {"eval_loss": loss, "perplexity": math.exp(loss), "answer_tokens": count}
    if loads_acc is not None:
        out["expert_loads"] = (loads_acc / n_valid).tolist()
    return out


class JsonlSink:
    def __init__(self, path):
        self.f = open(path, "w")

    def __call__(self, metrics: dict) -> None:
        self.f.write(json.dumps(metrics) + "\n")
        self.f.flush()

    def close(self) -> None:
        self.f.close()
