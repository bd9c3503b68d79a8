"""Fusion heads: (per-patch embeddings, occlusion flags) -> one compact template.

Three architectures share the two-layer projection block d_in -> hidden -> d_out
with a per-channel PReLU after the hidden layer:

  gated_sum ("ogctl", "ogctl_plus"): each patch is projected to the full output
      dimension, multiplied element-wise by its broadcast occlusion flag, batch
      normalized, and the n results are summed. A masked patch therefore
      contributes only the constant -gamma*mu/sqrt(var+eps) + beta, so garbage
      in occluded patches can never leak into the template. The "_plus" variant
      concatenates a shared auxiliary embedding onto every patch input.
  "a3": per-patch projections to D/n, concatenated; no gating, no normalization.
  "a4": one projection over the concatenation of all patches; no gating.

All backward passes are handwritten and validated against central differences.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NotFiniteError, ShapeError
from .records import EmbeddingSet, PatchEmbeddingRecord, TemplateSet

HEAD_KINDS = ("ogctl", "ogctl_plus", "a3", "a4")
GATED_KINDS = ("ogctl", "ogctl_plus")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "ogctl"
    n_patches: int = 8
    patch_dims: tuple[int, ...] | None = None   # defaults to (512,)*n_patches
    hidden: int = 64
    out_dim: int = 128
    aux_dim: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # Alternative reading of the gate/normalization composition: compute batch
    # statistics from visible rows only instead of the full (zero-gated) batch.
    bn_visible_only: bool = False

    def __post_init__(self) -> None:
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind '{self.kind}'")
        if self.patch_dims is None:
            object.__setattr__(self, "patch_dims", (512,) * self.n_patches)
        else:
            object.__setattr__(self, "patch_dims", tuple(int(d) for d in self.patch_dims))
        if len(self.patch_dims) != self.n_patches:
            raise ConfigError(
                f"patch_dims has {len(self.patch_dims)} entries for {self.n_patches} patches"
            )
        if self.n_patches < 1 or self.hidden < 1 or self.out_dim < 1:
            raise ConfigError("n_patches, hidden and out_dim must be >= 1")
        if any(d < 1 for d in self.patch_dims):
            raise ConfigError("patch dims must be >= 1")
        if self.kind == "a3" and self.out_dim % self.n_patches != 0:
            raise ConfigError(
                f"a3 needs out_dim divisible by n_patches ({self.out_dim} % {self.n_patches} != 0)"
            )
        if self.kind == "ogctl_plus":
            if self.aux_dim < 1:
                raise ConfigError("ogctl_plus needs aux_dim >= 1")
        elif self.aux_dim != 0:
            raise ConfigError(f"head kind '{self.kind}' does not consume an auxiliary vector")

    @property
    def gated(self) -> bool:
        return self.kind in GATED_KINDS

    @property
    def n_branches(self) -> int:
        return 1 if self.kind == "a4" else self.n_patches

    def branch_in_dim(self, i: int) -> int:
        if self.kind == "a4":
            return int(sum(self.patch_dims))
        return self.patch_dims[i] + (self.aux_dim if self.kind == "ogctl_plus" else 0)

    @property
    def branch_out_dim(self) -> int:
        if self.kind == "a3":
            return self.out_dim // self.n_patches
        return self.out_dim


@dataclass
class Branch:
    """Parameters of one projection branch (plus normalization when gated)."""

    w1: np.ndarray                      # (d_in, h)
    b1: np.ndarray                      # (h,)
    slope: np.ndarray                   # (h,) PReLU slopes, per channel
    w2: np.ndarray                      # (h, d_out)
    b2: np.ndarray                      # (d_out,)
    gamma: np.ndarray | None = None     # (d_out,)
    beta: np.ndarray | None = None
    run_mean: np.ndarray | None = None
    run_var: np.ndarray | None = None


@dataclass
class HeadParams:
    config: HeadConfig
    branches: list[Branch] = field(default_factory=list)
    bn_batches: int = 0                 # train batches folded into running stats

    @property
    def dtype(self) -> np.dtype:
        return self.branches[0].w1.dtype

    @property
    def stats_ready(self) -> bool:
        return (not self.config.gated) or self.bn_batches > 0

    def trainable(self) -> dict[str, np.ndarray]:
        """Ordered name -> array view of every learnable parameter."""
        out: dict[str, np.ndarray] = {}
        for i, br in enumerate(self.branches):
            out[f"b{i}.w1"] = br.w1
            out[f"b{i}.b1"] = br.b1
            out[f"b{i}.slope"] = br.slope
            out[f"b{i}.w2"] = br.w2
            out[f"b{i}.b2"] = br.b2
            if self.config.gated:
                out[f"b{i}.gamma"] = br.gamma
                out[f"b{i}.beta"] = br.beta
        return out

    def copy(self) -> "HeadParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "HeadParams":
        """Deep copy with every array cast (float64 clones for gradient checks)."""
        clone = self.copy()
        for br in clone.branches:
            for name in ("w1", "b1", "slope", "w2", "b2", "gamma", "beta", "run_mean", "run_var"):
                arr = getattr(br, name)
                if arr is not None:
                    setattr(br, name, arr.astype(dtype))
        return clone


def init_head(config: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> HeadParams:
    """Fan-in-scaled uniform weights, zero biases, PReLU slopes at 0.25."""
    branches = []
    for i in range(config.n_branches):
        d_in = config.branch_in_dim(i)
        d_out = config.branch_out_dim
        h = config.hidden
        s1 = 1.0 / np.sqrt(d_in)
        s2 = 1.0 / np.sqrt(h)
        br = Branch(
            w1=rng.uniform(-s1, s1, size=(d_in, h)).astype(dtype),
            b1=np.zeros(h, dtype=dtype),
            slope=np.full(h, 0.25, dtype=dtype),
            w2=rng.uniform(-s2, s2, size=(h, d_out)).astype(dtype),
            b2=np.zeros(d_out, dtype=dtype),
        )
        if config.gated:
            br.gamma = np.ones(d_out, dtype=dtype)
            br.beta = np.zeros(d_out, dtype=dtype)
            br.run_mean = np.zeros(d_out, dtype=dtype)
            br.run_var = np.ones(d_out, dtype=dtype)
        branches.append(br)
    return HeadParams(config=config, branches=branches)


def _prelu(z: np.ndarray, slope: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _branch_inputs(
    config: HeadConfig, patches: list[np.ndarray], aux: np.ndarray | None, dtype
) -> list[np.ndarray]:
    xs = [np.asarray(p, dtype=dtype) for p in patches]
    if len(xs) != config.n_patches:
        raise ShapeError(f"expected {config.n_patches} patch arrays, got {len(xs)}")
    for i, x in enumerate(xs):
        if x.shape[1] != config.patch_dims[i]:
            raise ShapeError(
                f"patch {i} has dim {x.shape[1]}, head expects {config.patch_dims[i]}"
            )
    if config.kind == "ogctl_plus":
        if aux is None:
            raise ConfigError("head is configured for an auxiliary vector but none was given")
        a = np.asarray(aux, dtype=dtype)
        if a.shape[1] != config.aux_dim:
            raise ShapeError(f"aux dim {a.shape[1]} != configured {config.aux_dim}")
        return [np.concatenate([x, a], axis=1) for x in xs]
    if config.kind == "a4":
        return [np.concatenate(xs, axis=1)]
    return xs


def forward(
    params: HeadParams,
    patches: list[np.ndarray],
    mask: np.ndarray,
    aux: np.ndarray | None = None,
    mode: str = "infer",
    update_stats: bool | None = None,
):
    """Batched head forward pass.

    patches: n arrays of shape (B, d_i); mask: (B, n) with 1 = visible.
    Returns (templates (B, out_dim), cache) where cache is None in infer mode.
    In train mode normalization uses batch statistics (and, unless
    update_stats=False, folds them into the running statistics); in infer mode
    it uses the running statistics, which must already be populated.
    """
    cfg = params.config
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got '{mode}'")
    if update_stats is None:
        update_stats = mode == "train"
    dtype = params.dtype
    xs = _branch_inputs(cfg, patches, aux, dtype)
    b = xs[0].shape[0]
    mask = np.asarray(mask)
    if mask.shape != (b, cfg.n_patches):
        raise ShapeError(f"mask shape {mask.shape} != ({b}, {cfg.n_patches})")
    if cfg.gated and mode == "infer" and not params.stats_ready:
        raise ConfigError("infer mode requires populated running statistics (train first)")

    t = np.zeros((b, cfg.out_dim), dtype=dtype)
    cache: dict | None = {"mode": mode, "branches": []} if mode == "train" else None
    chunks: list[np.ndarray] = []

    for i, br in enumerate(params.branches):
        x = xs[i]
        z1 = x @ br.w1 + br.b1
        a1 = _prelu(z1, br.slope)
        z2 = a1 @ br.w2 + br.b2

        if not cfg.gated:
            if cfg.kind == "a3":
                chunks.append(z2)
            else:
                t = z2
            if cache is not None:
                cache["branches"].append({"x": x, "z1": z1, "a1": a1})
            continue

        m_col = mask[:, i].astype(dtype)[:, None]
        g = z2 * m_col
        if mode == "train":
            if cfg.bn_visible_only:
                stats_w = m_col
                count = float(stats_w.sum())
            else:
                stats_w = np.ones((b, 1), dtype=dtype)
                count = float(b)
            if count > 0:
                mu = (stats_w * g).sum(axis=0) / count
                var = (stats_w * (g - mu) ** 2).sum(axis=0) / count
            else:
                # no visible rows: normalize the all-zero column as identity
                mu = np.zeros(cfg.out_dim, dtype=dtype)
                var = np.ones(cfg.out_dim, dtype=dtype)
            if update_stats and count > 0:
                unbiased = var * (count / (count - 1.0)) if count > 1 else var
                br.run_mean += cfg.bn_momentum * (mu - br.run_mean)
                br.run_var += cfg.bn_momentum * (unbiased - br.run_var)
        else:
            mu = br.run_mean
            var = br.run_var
            stats_w = None
            count = 0.0
        inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
        xhat = (g - mu) * inv_std
        y = br.gamma * xhat + br.beta
        t += y
        if cache is not None:
            cache["branches"].append(
                {
                    "x": x,
                    "z1": z1,
                    "a1": a1,
                    "m_col": m_col,
                    "xhat": xhat,
                    "inv_std": inv_std,
                    "stats_w": stats_w,
                    "count": count,
                }
            )

    if cfg.kind == "a3":
        t = np.concatenate(chunks, axis=1)
    if not np.all(np.isfinite(t)):
        raise NotFiniteError("head forward produced non-finite template values")
    if cache is not None and update_stats and cfg.gated:
        params.bn_batches += 1
    return t, cache


def backward(
    params: HeadParams,
    cache: dict,
    d_t: np.ndarray,
    with_dx: bool = False,
):
    """Exact gradients for all head parameters given dL/d(template).

    Requires the cache of a train-mode forward pass on the same batch. Returns
    (grads dict keyed like HeadParams.trainable(), d_inputs list or None).
    """
    if cache is None or cache.get("mode") != "train":
        raise ConfigError("backward needs the cache of a train-mode forward pass")
    cfg = params.config
    d_t = np.asarray(d_t, dtype=params.dtype)
    grads: dict[str, np.ndarray] = {}
    d_inputs: list[np.ndarray] | None = [] if with_dx else None

    chunk = cfg.branch_out_dim
    for i, br in enumerate(params.branches):
        cb = cache["branches"][i]
        if cfg.kind == "a3":
            dy = d_t[:, i * chunk : (i + 1) * chunk]
        else:
            dy = d_t

        if cfg.gated:
            xhat = cb["xhat"]
            inv_std = cb["inv_std"]
            grads[f"b{i}.gamma"] = (dy * xhat).sum(axis=0)
            grads[f"b{i}.beta"] = dy.sum(axis=0)
            dxhat = dy * br.gamma
            count = cb["count"]
            if count > 0:
                sum_dxhat = dxhat.sum(axis=0)
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=0)
                in_stats = cb["stats_w"] if cfg.bn_visible_only else 1.0
                dg = inv_std * (dxhat - in_stats * (sum_dxhat + xhat * sum_dxhat_xhat) / count)
            else:
                dg = inv_std * dxhat
            dz2 = dg * cb["m_col"]
        else:
            dz2 = dy

        a1 = cb["a1"]
        z1 = cb["z1"]
        x = cb["x"]
        grads[f"b{i}.w2"] = a1.T @ dz2
        grads[f"b{i}.b2"] = dz2.sum(axis=0)
        da1 = dz2 @ br.w2.T
        neg = z1 <= 0
        dz1 = da1 * np.where(neg, br.slope, params.dtype.type(1.0))
        grads[f"b{i}.slope"] = (da1 * np.where(neg, z1, 0.0)).sum(axis=0)
        grads[f"b{i}.w1"] = x.T @ dz1
        grads[f"b{i}.b1"] = dz1.sum(axis=0)
        if with_dx:
            d_inputs.append(dz1 @ br.w1.T)

    return grads, d_inputs


def encode_batch(
    params: HeadParams,
    patches: list[np.ndarray],
    mask: np.ndarray,
    aux: np.ndarray | None = None,
) -> np.ndarray:
    """Infer-mode templates for a batch; running statistics must be populated."""
    t, _ = forward(params, patches, mask, aux=aux, mode="infer")
    return t


def encode_record(record: PatchEmbeddingRecord, params: HeadParams) -> np.ndarray:
    """Infer-mode template for a single record."""
    record.validate()
    patches = [p[None, :] for p in record.patches]
    aux = None if record.aux is None else record.aux[None, :]
    return encode_batch(params, patches, np.asarray(record.occlusion)[None, :], aux=aux)[0]


def encode_set(dataset: EmbeddingSet, params: HeadParams, chunk: int = 4096) -> TemplateSet:
    """Encode a whole embedding set into a TemplateSet (infer mode, chunked)."""
    out = np.empty((len(dataset), params.config.out_dim), dtype=np.float32)
    for start in range(0, len(dataset), chunk):
        stop = min(start + chunk, len(dataset))
        t = encode_batch(
            params,
            [p[start:stop] for p in dataset.patches],
            dataset.occlusion[start:stop],
            aux=None if dataset.aux is None else dataset.aux[start:stop],
        )
        out[start:stop] = t.astype(np.float32)
    return TemplateSet(
        subjects=dataset.subjects.copy(), medias=dataset.medias.copy(), values=out
    )


def branch_outputs(record: PatchEmbeddingRecord, params: HeadParams) -> list[np.ndarray]:
    """Per-patch contributions t_hat_i (infer mode); their sum is the template."""
    cfg = params.config
    if not cfg.gated:
        raise ConfigError("per-patch contributions are defined for gated heads only")
    if not params.stats_ready:
        raise ConfigError("infer mode requires populated running statistics")
    record.validate()
    dtype = params.dtype
    xs = _branch_inputs(
        cfg,
        [p[None, :] for p in record.patches],
        None if record.aux is None else record.aux[None, :],
        dtype,
    )
    outs = []
    for i, br in enumerate(params.branches):
        z2 = _prelu(xs[i] @ br.w1 + br.b1, br.slope) @ br.w2 + br.b2
        g = z2 * dtype.type(record.occlusion[i])
        xhat = (g - br.run_mean) / np.sqrt(br.run_var + cfg.bn_eps)
        outs.append((br.gamma * xhat + br.beta)[0])
    return outs


def masked_contribution(params: HeadParams, i: int) -> np.ndarray:
    """Closed-form constant a masked patch adds to the template (infer mode)."""
    cfg = params.config
    if not cfg.gated:
        raise ConfigError("masked contributions are defined for gated heads only")
    br = params.branches[i]
    return -br.gamma * br.run_mean / np.sqrt(br.run_var + cfg.bn_eps) + br.beta
