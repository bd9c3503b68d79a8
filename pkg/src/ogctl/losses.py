"""Training objectives: angular-margin softmax over unit-norm class vectors,
plus a plain affine softmax baseline. Both return exact analytic gradients.

The angular loss scores a template t against class vectors w_c (kept at unit
norm) with logits ||t||*cos(theta_c); the target class instead gets
||t||*psi(omega*theta) where psi is the piecewise-monotonic extension
psi(theta) = (-1)^k cos(omega*theta) - 2k on [k*pi/omega, (k+1)*pi/omega].
The raw cos(omega*theta) form is non-monotonic beyond pi/omega and does not
train stably; it stays available behind `monotonic=False`. Early iterations are
annealed by blending the plain cosine logit with weight lambda/(1+lambda).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ZeroNormError

_NORM_FLOOR = 1e-12


@dataclass
class ClassProjection:
    """Unit-row class matrix plus the angular-margin hyperparameters."""

    weight: np.ndarray              # (C, D), every row unit norm
    omega: int = 4
    lambda_start: float = 1000.0
    lambda_min: float = 5.0
    lambda_decay: float = 0.1
    lambda_value: float = 1000.0
    monotonic: bool = True

    @property
    def n_classes(self) -> int:
        return int(self.weight.shape[0])

    def validate(self) -> None:
        if self.omega < 1 or int(self.omega) != self.omega:
            raise ConfigError(f"omega must be a positive integer, got {self.omega}")
        if self.lambda_value < 0 or self.lambda_min < 0 or self.lambda_decay < 0:
            raise ConfigError("lambda parameters must be nonnegative")


@dataclass
class AffineClassifier:
    """Unconstrained weight + bias for the plain softmax baseline."""

    weight: np.ndarray              # (C, D)
    bias: np.ndarray                # (C,)

    @property
    def n_classes(self) -> int:
        return int(self.weight.shape[0])


def init_class_projection(
    n_classes: int,
    dim: int,
    rng: np.random.Generator,
    omega: int = 4,
    lambda_start: float = 1000.0,
    lambda_min: float = 5.0,
    lambda_decay: float = 0.1,
    monotonic: bool = True,
    dtype=np.float32,
) -> ClassProjection:
    w = rng.standard_normal((n_classes, dim)).astype(dtype)
    proj = ClassProjection(
        weight=w,
        omega=int(omega),
        lambda_start=float(lambda_start),
        lambda_min=float(lambda_min),
        lambda_decay=float(lambda_decay),
        lambda_value=float(lambda_start),
        monotonic=monotonic,
    )
    proj.validate()
    renormalize_rows(proj.weight)
    return proj


def init_affine_classifier(
    n_classes: int, dim: int, rng: np.random.Generator, dtype=np.float32
) -> AffineClassifier:
    scale = 1.0 / np.sqrt(dim)
    return AffineClassifier(
        weight=rng.uniform(-scale, scale, size=(n_classes, dim)).astype(dtype),
        bias=np.zeros(n_classes, dtype=dtype),
    )


def renormalize_rows(weight: np.ndarray) -> None:
    """Rescale every row to unit Euclidean norm, in place (norms in float64)."""
    norms = np.linalg.norm(weight.astype(np.float64, copy=False), axis=1, keepdims=True)
    if np.any(norms < _NORM_FLOOR):
        raise ZeroNormError("cannot renormalize a zero row")
    weight /= norms


def decay_lambda(proj: ClassProjection, iteration: int) -> float:
    """Annealing schedule lambda = max(lambda_min, lambda_start/(1 + decay*it))."""
    proj.lambda_value = max(
        proj.lambda_min, proj.lambda_start / (1.0 + proj.lambda_decay * iteration)
    )
    return proj.lambda_value


def _chebyshev_u(c: np.ndarray, n: int) -> np.ndarray:
    """Second-kind Chebyshev polynomial U_n(c) = sin((n+1)theta)/sin(theta)."""
    if n == 0:
        return np.ones_like(c)
    prev = np.ones_like(c)
    cur = 2.0 * c
    for _ in range(1, n):
        prev, cur = cur, 2.0 * c * cur - prev
    return cur


def angular_margin(cos_theta: np.ndarray, omega: int, monotonic: bool = True):
    """psi(theta) evaluated at cos(theta), plus d psi / d cos(theta).

    monotonic=True gives the piecewise extension (-1)^k cos(omega*theta) - 2k;
    monotonic=False gives raw cos(omega*theta). Derivatives go through the
    second-kind Chebyshev polynomial, so theta=0 and theta=pi are regular.
    """
    c = np.clip(cos_theta, -1.0, 1.0)
    theta = np.arccos(c)
    cos_m = np.cos(omega * theta)
    dcos_m = omega * _chebyshev_u(c, omega - 1)  # d cos(omega*theta) / d cos(theta)
    if not monotonic:
        return cos_m, dcos_m
    k = np.clip(np.floor(omega * theta / np.pi), 0, omega - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    return sign * cos_m - 2.0 * k, sign * dcos_m


def asoftmax_logits(templates: np.ndarray, labels: np.ndarray, proj: ClassProjection):
    """Margin logits ||t||*cos(theta_c), target column annealed toward psi.

    Returns (logits, extras); extras carries the intermediates the gradient
    needs (norms, target cosines, blend and its cosine derivative).
    """
    t = np.asarray(templates)
    y = np.asarray(labels)
    w = proj.weight
    b = t.shape[0]
    if y.shape != (b,):
        raise ConfigError(f"labels shape {y.shape} != ({b},)")
    if y.size and (y.min() < 0 or y.max() >= proj.n_classes):
        raise ConfigError(f"label out of range [0, {proj.n_classes})")

    r = np.linalg.norm(t, axis=1)
    if np.any(r < _NORM_FLOOR):
        idx = int(np.argmin(r))
        raise ZeroNormError(f"template {idx} has (near-)zero norm")

    cos = (t @ w.T) / r[:, None]
    rows = np.arange(b)
    cos_y = cos[rows, y]
    psi, dpsi = angular_margin(cos_y, proj.omega, proj.monotonic)
    lam = proj.lambda_value
    blend = (lam * cos_y + psi) / (1.0 + lam)        # annealed target cosine
    dblend = (lam + dpsi) / (1.0 + lam)

    logits = cos * r[:, None]
    logits[rows, y] = r * blend
    return logits, {"r": r, "cos_y": cos_y, "blend": blend, "dblend": dblend}


def asoftmax_loss(templates: np.ndarray, labels: np.ndarray, proj: ClassProjection):
    """Angular-margin cross-entropy over a batch.

    Returns (mean loss, dL/d templates, dL/d weight). Class rows are assumed
    unit norm; templates must be nonzero (the loss depends on angles only, so
    the classification decision is invariant to template magnitude).
    """
    t = np.asarray(templates)
    y = np.asarray(labels)
    w = proj.weight
    b = t.shape[0]
    logits, ex = asoftmax_logits(t, y, proj)
    r, cos_y, blend, dblend = ex["r"], ex["cos_y"], ex["blend"], ex["dblend"]
    rows = np.arange(b)

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[rows, y]))

    p = np.exp(shifted - log_z[:, None])
    g = p
    g[rows, y] -= 1.0
    g /= b
    g_y = g[rows, y].copy()

    g_mod = g
    g_mod[rows, y] = g_y * dblend
    d_t = g_mod @ w + ((g_y * (blend - dblend * cos_y)) / r)[:, None] * t
    d_w = g_mod.T @ t
    return loss, d_t.astype(t.dtype), d_w.astype(w.dtype)


def softmax_loss(templates: np.ndarray, labels: np.ndarray, clf: AffineClassifier):
    """Plain cross-entropy over affine logits; returns (loss, dT, dW, db)."""
    t = np.asarray(templates)
    y = np.asarray(labels)
    b = t.shape[0]
    if y.size and (y.min() < 0 or y.max() >= clf.n_classes):
        raise ConfigError(f"label out of range [0, {clf.n_classes})")
    logits = t @ clf.weight.T + clf.bias
    rows = np.arange(b)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[rows, y]))
    g = np.exp(shifted - log_z[:, None])
    g[rows, y] -= 1.0
    g /= b
    d_t = g @ clf.weight
    d_w = g.T @ t
    d_b = g.sum(axis=0)
    return loss, d_t.astype(t.dtype), d_w.astype(clf.weight.dtype), d_b.astype(clf.bias.dtype)
