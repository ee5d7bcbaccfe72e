"""Adam with per-group learning rates, non-finite-step protection, and the
post-step projections that keep scene parameters inside their valid domains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MIN_SPEC_EXPONENT = 1e-2


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    skipped: int = 0

    @classmethod
    def like(cls, param: torch.Tensor) -> "AdamState":
        return cls(m=torch.zeros_like(param), v=torch.zeros_like(param))


def adam_step(param: torch.Tensor, grad: torch.Tensor | None, state: AdamState,
              lr: float) -> bool:
    """One bias-corrected Adam update in place; returns False when skipped.

    A non-finite gradient skips the group for this step and bumps the
    ``skipped`` counter instead of poisoning the moments.
    """
    if grad is None:
        return False
    if not bool(torch.isfinite(grad).all()):
        state.skipped += 1
        return False
    state.step += 1
    state.m.mul_(ADAM_BETA1).add_(grad, alpha=1.0 - ADAM_BETA1)
    state.v.mul_(ADAM_BETA2).addcmul_(grad, grad, value=1.0 - ADAM_BETA2)
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    m_hat = state.m / bc1
    v_hat = state.v / bc2
    with torch.no_grad():
        param.add_(-lr * m_hat / (v_hat.sqrt() + ADAM_EPS))
    return True


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible stream keyed by (seed, label) via Philox."""
    import zlib

    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(zlib.crc32(label.encode()))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class GroupOptimizer:
    """Adam over named parameter tensors with per-group learning rates."""

    def __init__(self, params: dict[str, torch.Tensor], rates: dict[str, float]):
        self.params = params
        self.rates = dict(rates)
        self.state = {name: AdamState.like(p) for name, p in params.items()}
        self.lr_scale = 1.0

    def step(self) -> None:
        for name, p in self.params.items():
            adam_step(p, p.grad, self.state[name], self.rates[name] * self.lr_scale)

    def zero_grad(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    @property
    def skipped(self) -> dict[str, int]:
        return {k: s.skipped for k, s in self.state.items() if s.skipped}


def project_scene_constraints(ts) -> None:
    """Clamp optimized tensors back into their valid domains (in place)."""
    with torch.no_grad():
        ts.sun_dir.div_(torch.linalg.norm(ts.sun_dir).clamp_min(1e-20))
        ts.albedo.clamp_(0.0, 1.0)
        ts.envmap.clamp_min_(0.0)
        ts.spec_intensity.clamp_min_(0.0)
        ts.spec_exponent.clamp_min_(MIN_SPEC_EXPONENT)
        ts.sun_intensity.clamp_min_(0.0)
        ts.scene_scale.clamp_min_(1e-12)
