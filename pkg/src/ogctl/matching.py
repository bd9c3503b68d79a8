"""Template comparison: cosine scores, the masked per-patch baseline matcher,
image-set pooling and the norm-precomputed gallery used for 1:N search.

Compact templates are compared by plain cosine similarity; magnitude carries no
information. The baseline matcher instead averages per-patch cosine scores over
the patches visible in BOTH faces, which is what the gated head replaces.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ZeroNormError
from .records import EmbeddingSet

_NORM_FLOOR = 1e-12


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (|a||b|), in [-1, 1]; raises on (near-)zero-norm input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"template shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < _NORM_FLOOR or nb < _NORM_FLOOR:
        raise ZeroNormError("cosine similarity of a zero-norm template is undefined")
    return float(a @ b / (na * nb))


@dataclass
class DprfsTemplate:
    """Uncompressed representation: n patch vectors plus the occlusion vector."""

    patches: list[np.ndarray]
    mask: np.ndarray               # (n,) uint8, 1 = visible

    @property
    def n_patches(self) -> int:
        return len(self.patches)


def dprfs_score(
    a: DprfsTemplate, b: DprfsTemplate, zero_overlap_score: float = 0.0
) -> tuple[float, bool]:
    """Mean per-patch cosine over patches visible in both faces.

    Returns (score, overlapped). Pairs with no commonly visible patch get the
    sentinel score and overlapped=False so reports can flag them.
    """
    if a.n_patches != b.n_patches:
        raise ShapeError(f"patch counts differ: {a.n_patches} vs {b.n_patches}")
    total = 0.0
    common = 0
    for i in range(a.n_patches):
        if not (a.mask[i] and b.mask[i]):
            continue
        if a.patches[i].shape != b.patches[i].shape:
            raise ShapeError(f"patch {i} dims differ")
        total += cosine_similarity(a.patches[i], b.patches[i])
        common += 1
    if common == 0:
        return float(zero_overlap_score), False
    return total / common, True


@dataclass
class DprfsGallery:
    """Per-patch matrices with cached norms for vectorized baseline matching."""

    patches: list[np.ndarray]      # n arrays (N, d_i)
    masks: np.ndarray              # (N, n)
    norms: np.ndarray              # (N, n) per-patch Euclidean norms
    labels: np.ndarray             # (N,)

    @classmethod
    def build(cls, dataset: EmbeddingSet) -> "DprfsGallery":
        norms = np.stack(
            [np.linalg.norm(p.astype(np.float64), axis=1) for p in dataset.patches], axis=1
        )
        visible_zero = (norms < _NORM_FLOOR) & (dataset.occlusion > 0)
        if visible_zero.any():
            r, c = np.argwhere(visible_zero)[0]
            raise ZeroNormError(f"record {r} has a zero-norm visible patch {c}")
        return cls(
            patches=[p.astype(np.float64) for p in dataset.patches],
            masks=dataset.occlusion.astype(bool),
            norms=norms,
            labels=dataset.subjects.copy(),
        )

    def __len__(self) -> int:
        return int(self.masks.shape[0])


def dprfs_scores(
    probe: DprfsTemplate, gallery: DprfsGallery, zero_overlap_score: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized baseline scores of one probe against a whole gallery.

    Returns (scores (N,), overlapped (N,) bool). Equivalent to calling
    dprfs_score per pair; patches masked in either face are skipped.
    """
    n = probe.n_patches
    if n != len(gallery.patches):
        raise ShapeError(f"patch counts differ: {n} vs {len(gallery.patches)}")
    count = len(gallery)
    total = np.zeros(count)
    common = np.zeros(count)
    for i in range(n):
        if not probe.mask[i]:
            continue
        p = np.asarray(probe.patches[i], dtype=np.float64)
        pn = np.linalg.norm(p)
        if pn < _NORM_FLOOR:
            raise ZeroNormError(f"probe has a zero-norm visible patch {i}")
        both = gallery.masks[:, i]
        denom = np.where(both, gallery.norms[:, i], 1.0) * pn
        sims = (gallery.patches[i] @ p) / denom
        total += np.where(both, sims, 0.0)
        common += both
    overlapped = common > 0
    scores = np.where(overlapped, total / np.maximum(common, 1), zero_overlap_score)
    return scores, overlapped


def pool_image_set(templates) -> np.ndarray:
    """Element-wise mean of the templates of one image set (order-independent)."""
    values = [np.asarray(t) for t in templates]
    if not values:
        raise ShapeError("cannot pool an empty template list")
    dim = values[0].shape
    if any(v.shape != dim for v in values):
        raise ShapeError("pooled templates must share one dimension")
    return np.mean(np.stack(values, axis=0), axis=0)


@dataclass
class Gallery:
    """Immutable, norm-precomputed compact-template collection for 1:N search."""

    values: np.ndarray             # (N, D) raw templates, not normalized
    norms: np.ndarray              # (N,)
    labels: np.ndarray             # (N,)

    @classmethod
    def build(cls, values: np.ndarray, labels: np.ndarray) -> "Gallery":
        values = np.ascontiguousarray(values, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if values.ndim != 2 or values.shape[0] == 0:
            raise ShapeError("gallery needs a nonempty (N, D) template matrix")
        if labels.shape != (values.shape[0],):
            raise ShapeError("gallery labels must match template rows")
        if not np.all(np.isfinite(values)):
            raise ZeroNormError("gallery templates must be finite")
        norms = np.linalg.norm(values.astype(np.float64), axis=1).astype(np.float32)
        if np.any(norms < _NORM_FLOOR):
            raise ZeroNormError(f"gallery row {int(np.argmin(norms))} has zero norm")
        values.setflags(write=False)
        norms.setflags(write=False)
        labels.setflags(write=False)
        return cls(values=values, norms=norms, labels=labels)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def similarities(self, probe: np.ndarray) -> np.ndarray:
        """Cosine scores of one probe against every gallery row."""
        probe = np.asarray(probe, dtype=np.float32)
        if probe.shape != (self.dim,):
            raise ShapeError(f"probe shape {probe.shape} != ({self.dim},)")
        pn = float(np.linalg.norm(probe.astype(np.float64)))
        if pn < _NORM_FLOOR:
            raise ZeroNormError("probe template has zero norm")
        return (self.values @ probe) / (self.norms * np.float32(pn))
