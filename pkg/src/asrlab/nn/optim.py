"""Nadam optimizer, learning-rate schedules, gradient noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeMismatch


class Nadam:
    """Adam with Nesterov momentum (Dozat 2016), bias-corrected."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeMismatch("gradient/parameter shape mismatch")
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            update = b1 * m_hat + (1 - b1) * g / (1 - b1**self.t)
            p.data -= lr * update / (np.sqrt(v_hat) + self.eps)


@dataclass
class Phase:
    kind: str  # linear_warmup | hold | exp_decay
    steps: int = 0  # for warmup/hold
    start: float = 0.0
    end: float = 0.0
    factor: float = 0.9
    floor: float = 0.0


@dataclass
class LrSchedule:
    """Piecewise schedule: warmup / hold / exponential decay phases."""

    phases: list = field(default_factory=list)

    @staticmethod
    def warmup_hold_decay(start, peak, warmup_steps, hold_steps, factor, floor):
        return LrSchedule([
            Phase("linear_warmup", steps=warmup_steps, start=start, end=peak),
            Phase("hold", steps=hold_steps, start=peak, end=peak),
            Phase("exp_decay", start=peak, factor=factor, floor=floor),
        ])

    @staticmethod
    def constant(rate):
        return LrSchedule([Phase("hold", steps=0, start=rate, end=rate)])

    def rate(self, step):
        return schedule_rate(self, step)


def schedule_rate(schedule, step):
    """Learning rate at a given (0-based) step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    s = step
    last = None
    for ph in schedule.phases:
        if ph.kind == "linear_warmup":
            if s <= ph.steps:
                frac = s / ph.steps if ph.steps else 1.0
                return ph.start + frac * (ph.end - ph.start)
            s -= ph.steps
            last = ph.end
        elif ph.kind == "hold":
            if s <= ph.steps:
                return ph.start
            s -= ph.steps
            last = ph.start
        elif ph.kind == "exp_decay":
            base = ph.start if ph.start else last
            return max(base * ph.factor**s, ph.floor)
        else:
            raise ValueError(f"unknown phase kind {ph.kind}")
    return last if last is not None else schedule.phases[-1].end


def gradient_noise(grads, fraction, rng):
    """Add zero-mean Gaussian noise with std = fraction * per-tensor grad RMS."""
    if fraction <= 0:
        return grads
    out = []
    for g in grads:
        rms = np.sqrt(np.mean(g * g))
        out.append(g + rng.normal(0.0, fraction * rms, g.shape) if rms > 0 else g)
    return out


def apply_gradient_noise(params, fraction, rng):
    """In-place variant over parameter .grad buffers."""
    if fraction <= 0:
        return
    for p in params:
        if p.grad is None:
            continue
        rms = np.sqrt(np.mean(p.grad * p.grad))
        if rms > 0:
            p.grad = p.grad + rng.normal(0.0, fraction * rms, p.grad.shape)
