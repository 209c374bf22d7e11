"""AdamW with a linear warmup-then-decay schedule, plus the combined
multi-task step that feeds an aggregated direction to the shared block
and raw task gradients to the heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregators import AggregationResult


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def like(block: np.ndarray) -> "AdamWState":
        return AdamWState(m=np.zeros_like(block), v=np.zeros_like(block))


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float
    total_steps: int
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Piecewise-linear rate: 0 -> base_lr over the warmup steps, then
    base_lr -> 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warmup = int(round(cfg.warmup_fraction * cfg.total_steps))
    if step <= warmup:
        return cfg.base_lr if warmup == 0 else cfg.base_lr * step / warmup
    return cfg.base_lr * (cfg.total_steps - step) / (cfg.total_steps - warmup)


def adamw_step(
    block: np.ndarray,
    grad: np.ndarray,
    state: AdamWState,
    lr: float,
    cfg: AdamWConfig = AdamWConfig(),
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay multiplies the block by (1 - lr * weight_decay) before the
    bias-corrected moment update is subtracted.
    """
    if block.shape != grad.shape:
        raise ValueError("block and gradient shapes differ")
    state.step += 1
    t = state.step
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grad
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1**t)
    v_hat = state.v / (1.0 - cfg.beta2**t)
    block *= 1.0 - lr * cfg.weight_decay
    block -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class OptimizerStates:
    shared: AdamWState
    heads: dict = field(default_factory=dict)  # task -> AdamWState

    @staticmethod
    def for_params(params) -> "OptimizerStates":
        return OptimizerStates(
            shared=AdamWState.like(params.shared.flat),
            heads={t: AdamWState.like(b.flat) for t, b in params.heads.items()},
        )


def mtl_step(
    params,
    grad_matrix: np.ndarray,
    head_grads: dict,
    aggregate,
    lr: float,
    states: OptimizerStates,
    adam: AdamWConfig = AdamWConfig(),
) -> AggregationResult:
    """One combined training step.

    ``aggregate`` maps the gradient matrix to an
    :class:`~qelab.aggregators.AggregationResult`; its direction is fed
    to AdamW as the shared-block gradient (weights are bargained before
    preconditioning), while each head receives its own task's raw
    gradient. Aggregator fallbacks surface in the returned result, never
    as exceptions.
    """
    result: AggregationResult = aggregate(grad_matrix)
    adamw_step(params.shared.flat, result.direction, states.shared, lr, adam)
    for task, grad in head_grads.items():
        adamw_step(params.heads[task].flat, grad, states.heads[task], lr, adam)
    return result
