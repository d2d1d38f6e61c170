"""Ranger: rectified Adam (RAdam) inner steps wrapped by Lookahead.

Every ``k`` inner steps the slow weights move a fraction ``alpha`` toward
the fast weights and the fast weights are reset onto them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch.optim import Optimizer


@dataclass(frozen=True)
class RangerConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5
    rectify_threshold: float = 5.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lookahead_k < 1:
            raise ValueError("lookahead_k must be >= 1")
        if not 0 < self.lookahead_alpha < 1:
            raise ValueError("lookahead_alpha must lie in (0, 1)")


def radam_step_size(step: int, lr: float, betas, threshold: float = 5.0) -> tuple[float, bool]:
    """Step size and whether the adaptive (variance-rectified) branch applies."""
    beta1, beta2 = betas
    beta2_t = beta2**step
    rho_inf = 2 / (1 - beta2) - 1
    rho_t = rho_inf - 2 * step * beta2_t / (1 - beta2_t)
    bias1 = 1 - beta1**step
    if rho_t >= threshold:
        rect = math.sqrt(
            (rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t)
        )
        return lr * rect * math.sqrt(1 - beta2_t) / bias1, True
    return lr / bias1, False


def _inner_update(p, g, exp_avg, exp_avg_sq, step, cfg: RangerConfig):
    beta1, beta2 = cfg.betas
    if cfg.weight_decay:
        g = g.add(p, alpha=cfg.weight_decay)
    exp_avg.mul_(beta1).add_(g, alpha=1 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(g, g, value=1 - beta2)
    step_size, adaptive = radam_step_size(step, cfg.lr, cfg.betas, cfg.rectify_threshold)
    if adaptive:
        p.addcdiv_(exp_avg, exp_avg_sq.sqrt().add_(cfg.eps * math.sqrt(1 - cfg.betas[1] ** step)),
                   value=-step_size)
    else:
        p.add_(exp_avg, alpha=-step_size)


def _sync(p, slow, alpha):
    slow.add_(p - slow, alpha=alpha)
    p.copy_(slow)


@dataclass
class RangerState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)
    slow: list = field(default_factory=list)


def optimizer_step(
    state: RangerState | None,
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    config: RangerConfig,
) -> tuple[RangerState, list[torch.Tensor]]:
    """Pure form of one Ranger step: inputs are not modified."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("params and grads must agree in number and shape")
    if state is None or state.step == 0 and not state.slow:
        state = RangerState(
            step=0,
            exp_avg=[torch.zeros_like(p) for p in params],
            exp_avg_sq=[torch.zeros_like(p) for p in params],
            slow=[p.detach().clone() for p in params],
        )
    step = state.step + 1
    for g in grads:
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient at step {step}")
    new = RangerState(
        step=step,
        exp_avg=[m.clone() for m in state.exp_avg],
        exp_avg_sq=[v.clone() for v in state.exp_avg_sq],
        slow=[s.clone() for s in state.slow],
    )
    out = [p.detach().clone() for p in params]
    for p, g, m, v, s in zip(out, grads, new.exp_avg, new.exp_avg_sq, new.slow):
        _inner_update(p, g.detach(), m, v, step, config)
        if step % config.lookahead_k == 0:
            _sync(p, s, config.lookahead_alpha)
    return new, out


class Ranger(Optimizer):
    """In-place torch optimizer sharing the update rule of :func:`optimizer_step`."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 lookahead_k=6, lookahead_alpha=0.5):
        RangerConfig(lr, tuple(betas), eps, weight_decay, lookahead_k, lookahead_alpha)
        defaults = dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay,
                        lookahead_k=lookahead_k, lookahead_alpha=lookahead_alpha)
        super().__init__(params, defaults)
        self.n_steps = 0

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        self.n_steps += 1
        for group in self.param_groups:
            cfg = RangerConfig(group["lr"], group["betas"], group["eps"], group["weight_decay"],
                               group["lookahead_k"], group["lookahead_alpha"])
            for p in group["params"]:
                if p.grad is None:
                    continue
                if not torch.isfinite(p.grad).all():
                    raise FloatingPointError(f"non-finite gradient at step {self.n_steps}")
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                    state["slow"] = p.detach().clone()
                state["step"] += 1
                _inner_update(p, p.grad, state["exp_avg"], state["exp_avg_sq"], state["step"], cfg)
                if state["step"] % cfg.lookahead_k == 0:
                    _sync(p, state["slow"], cfg.lookahead_alpha)
        return loss
