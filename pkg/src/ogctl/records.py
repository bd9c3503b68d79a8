"""Data model: per-patch embedding records, batched embedding sets, template sets.

An embedding record carries n per-patch feature vectors plus a binary occlusion
vector (1 = patch visible). Occluded patches may contain arbitrary garbage; the
gated head guarantees that garbage never reaches the output template.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NotFiniteError, ShapeError


def summarize_occlusion(fractions: np.ndarray, eps: float) -> np.ndarray:
    """Binary occlusion flags from per-patch visible-pixel fractions.

    A patch counts as visible (m=1) iff its visible fraction is >= eps; the
    boundary is inclusive by convention.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if not (0.0 < eps <= 1.0):
        raise ConfigError(f"occlusion threshold eps must be in (0, 1], got {eps}")
    if fractions.size and (fractions.min() < 0.0 or fractions.max() > 1.0):
        raise ConfigError("visible fractions must lie in [0, 1]")
    return (fractions >= eps).astype(np.uint8)


def _check_occlusion_flags(occlusion: np.ndarray) -> None:
    if occlusion.size and not np.isin(occlusion, (0, 1)).all():
        raise ConfigError("occlusion flags must be 0 or 1")


@dataclass
class PatchEmbeddingRecord:
    """One face: n patch vectors, occlusion flags, identity/media labels."""

    subject: int
    media: int
    patches: list[np.ndarray]           # n float vectors
    occlusion: np.ndarray               # (n,) uint8, 1 = visible
    aux: np.ndarray | None = None       # optional auxiliary embedding

    def validate(self) -> None:
        n = len(self.patches)
        occ = np.asarray(self.occlusion)
        if occ.shape != (n,):
            raise ShapeError(f"occlusion shape {occ.shape} != ({n},)")
        _check_occlusion_flags(occ)
        for i, p in enumerate(self.patches):
            if p.ndim != 1:
                raise ShapeError(f"patch {i} must be a vector, got shape {p.shape}")
            if not np.all(np.isfinite(p)):
                raise NotFiniteError(f"non-finite values in patch {i}")
        if self.aux is not None and not np.all(np.isfinite(self.aux)):
            raise NotFiniteError("non-finite values in auxiliary vector")


@dataclass
class EmbeddingSet:
    """Struct-of-arrays batch of embedding records (the in-memory dataset)."""

    patch_dims: tuple[int, ...]
    subjects: np.ndarray                # (K,) int64
    medias: np.ndarray                  # (K,) int64
    occlusion: np.ndarray               # (K, n) uint8
    patches: list[np.ndarray] = field(default_factory=list)  # n arrays of (K, d_i) float32
    aux: np.ndarray | None = None       # (K, d_aux) float32 or None

    @property
    def n_patches(self) -> int:
        return len(self.patch_dims)

    @property
    def aux_dim(self) -> int:
        return 0 if self.aux is None else int(self.aux.shape[1])

    def __len__(self) -> int:
        return int(self.subjects.shape[0])

    def record(self, i: int) -> PatchEmbeddingRecord:
        return PatchEmbeddingRecord(
            subject=int(self.subjects[i]),
            media=int(self.medias[i]),
            patches=[p[i] for p in self.patches],
            occlusion=self.occlusion[i],
            aux=None if self.aux is None else self.aux[i],
        )

    def validate(self) -> None:
        k = len(self)
        n = self.n_patches
        if self.medias.shape != (k,):
            raise ShapeError("medias length does not match subjects")
        if self.occlusion.shape != (k, n):
            raise ShapeError(f"occlusion shape {self.occlusion.shape} != ({k}, {n})")
        _check_occlusion_flags(self.occlusion)
        if len(self.patches) != n:
            raise ShapeError(f"expected {n} patch arrays, got {len(self.patches)}")
        for i, (p, d) in enumerate(zip(self.patches, self.patch_dims)):
            if p.shape != (k, d):
                raise ShapeError(f"patch {i} array shape {p.shape} != ({k}, {d})")
            if not np.all(np.isfinite(p)):
                raise NotFiniteError(f"non-finite values in patch {i}")
        if self.aux is not None:
            if self.aux.shape[0] != k:
                raise ShapeError("aux row count does not match records")
            if not np.all(np.isfinite(self.aux)):
                raise NotFiniteError("non-finite values in aux")


@dataclass
class TemplateSet:
    """Labeled compact templates, one row per face/media."""

    subjects: np.ndarray                # (K,) int64
    medias: np.ndarray                  # (K,) int64
    values: np.ndarray                  # (K, D) float32

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def validate(self) -> None:
        k = len(self)
        if self.subjects.shape != (k,) or self.medias.shape != (k,):
            raise ShapeError("template labels do not match value rows")
        if not np.all(np.isfinite(self.values)):
            raise NotFiniteError("non-finite template values")
