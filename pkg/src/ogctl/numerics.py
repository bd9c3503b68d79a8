"""Numeric substrate: seeded RNG, Adam updates and a finite-difference gradient checker.

Dense arrays are plain numpy ndarrays in row-major order. Production paths run in
float32; gradient checking requires a float64 clone of the computation (central
differences at h=1e-4 drown in float32 rounding noise).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NotFiniteError, ShapeError

Arrays = dict[str, np.ndarray]


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; same seed gives bit-identical streams on a build."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NotFiniteError(f"non-finite values in '{name}'")


@dataclass
class AdamState:
    """Adaptive-moment accumulators for one named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Arrays = field(default_factory=dict)
    v: Arrays = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("adam: lr and eps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam: betas must lie in [0, 1)")


def adam_step(params: Arrays, grads: Arrays, state: AdamState) -> None:
    """One bias-corrected Adam update, applied to `params` in place.

    Moment buffers are created lazily (zeros) the first time a parameter is seen.
    """
    missing = set(params) - set(grads)
    if missing:
        raise ShapeError(f"adam: missing gradient for parameter '{sorted(missing)[0]}'")
    extra = set(grads) - set(params)
    if extra:
        raise ShapeError(f"adam: gradient for unknown parameter '{sorted(extra)[0]}'")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"adam: gradient shape {g.shape} does not match parameter '{name}' {p.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


LossAndGrad = Callable[[Arrays], tuple[float, Arrays]]


def finite_diff_check(loss_and_grad: LossAndGrad, params: Arrays, h: float = 1e-4) -> dict[str, float]:
    """Max relative error between analytic gradients and central differences.

    `loss_and_grad(params)` must be pure and return (scalar loss, gradient dict).
    Every parameter must be float64. Error per entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); the returned dict
    holds the max over entries for each parameter block.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ConfigError(f"finite_diff_check: parameter '{name}' must be float64, got {p.dtype}")

    _, analytic = loss_and_grad(params)
    errors: dict[str, float] = {}
    for name, p in params.items():
        a = analytic[name]
        if a.shape != p.shape:
            raise ShapeError(f"analytic gradient shape {a.shape} != parameter '{name}' {p.shape}")
        worst = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp, _ = loss_and_grad(params)
            p[idx] = orig - h
            lm, _ = loss_and_grad(params)
            p[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NotFiniteError(
                    f"loss non-finite when perturbing '{name}'[{idx}] by ±{h:g}"
                )
            numeric = (lp - lm) / (2.0 * h)
            rel = abs(a[idx] - numeric) / max(abs(a[idx]), abs(numeric), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
    return errors
