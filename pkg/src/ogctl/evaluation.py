"""Biometric evaluation: 1:N identification (CMC, rank-k), 1:1 verification
(ROC, TAR@FAR, AUC) and the matcher throughput benchmark."""
from __future__ import annotations

import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .matching import DprfsGallery, Gallery, dprfs_scores

DEFAULT_FAR_TARGETS = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class IdentificationReport:
    ranks: np.ndarray              # (P,) 1-based rank of the true subject
    cmc: np.ndarray                # (N,) cumulative match characteristic
    rank_accuracy: dict[int, float]
    n_probes: int
    n_excluded: int                # probe subjects absent from the gallery

    def to_dict(self) -> dict:
        return {
            "protocol": "identification",
            "n_probes": self.n_probes,
            "n_excluded": self.n_excluded,
            "rank_accuracy": {str(k): v for k, v in self.rank_accuracy.items()},
            "cmc": [float(v) for v in self.cmc],
        }


def identify(
    probe_values: np.ndarray, probe_labels: np.ndarray, gallery: Gallery
) -> IdentificationReport:
    """Rank every probe against the gallery; ties break toward lower gallery index.

    Probes whose subject has no gallery entry are excluded from the curves and
    counted in the report.
    """
    probe_values = np.asarray(probe_values)
    probe_labels = np.asarray(probe_labels)
    if probe_values.ndim != 2 or probe_values.shape[1] != gallery.dim:
        raise ShapeError(
            f"probe matrix shape {probe_values.shape} incompatible with gallery dim {gallery.dim}"
        )
    known = set(int(v) for v in gallery.labels)
    ranks = []
    excluded = 0
    for row, label in zip(probe_values, probe_labels):
        if int(label) not in known:
            excluded += 1
            continue
        sims = gallery.similarities(row)
        order = np.argsort(-sims, kind="stable")     # stable: equal scores keep low index first
        hits = np.nonzero(gallery.labels[order] == label)[0]
        ranks.append(int(hits[0]) + 1)
    if not ranks:
        raise ConfigError("no probe subject appears in the gallery")
    ranks = np.asarray(ranks, dtype=np.int64)
    n = len(gallery)
    cmc = np.array([(ranks <= k).mean() for k in range(1, n + 1)])
    rank_accuracy = {k: float(cmc[k - 1]) for k in (1, 2, 5, 10, 20, 50, 100) if k <= n}
    return IdentificationReport(
        ranks=ranks,
        cmc=cmc,
        rank_accuracy=rank_accuracy,
        n_probes=int(ranks.size),
        n_excluded=excluded,
    )


@dataclass
class VerificationReport:
    far: np.ndarray                # ascending, one point per distinct threshold
    tar: np.ndarray
    thresholds: np.ndarray
    auc: float
    tar_at_far: dict[float, float | None]   # None = not estimable at this scale
    n_genuine: int
    n_impostor: int

    def to_dict(self) -> dict:
        return {
            "protocol": "verification",
            "n_genuine": self.n_genuine,
            "n_impostor": self.n_impostor,
            "auc": self.auc,
            "tar_at_far": {f"{far:g}": tar for far, tar in self.tar_at_far.items()},
        }

    def roc_rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.tar.tolist()))


def roc_points(genuine: np.ndarray, impostor: np.ndarray):
    """(far, tar, thresholds) swept over every distinct score, threshold descending.

    A pair is accepted when score >= threshold, so the curve starts at (0, 0)
    for threshold +inf and ends at (1, 1).
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    thresholds = np.unique(np.concatenate([genuine, impostor]))[::-1]
    g_sorted = np.sort(genuine)
    i_sorted = np.sort(impostor)
    # accepted counts at each threshold via binary search on the sorted scores
    tar = 1.0 - np.searchsorted(g_sorted, thresholds, side="left") / genuine.size
    far = 1.0 - np.searchsorted(i_sorted, thresholds, side="left") / impostor.size
    far = np.concatenate([[0.0], far])
    tar = np.concatenate([[0.0], tar])
    thresholds = np.concatenate([[np.inf], thresholds])
    return far, tar, thresholds


def verify(
    scores: np.ndarray,
    genuine_flags: np.ndarray,
    far_targets=DEFAULT_FAR_TARGETS,
) -> VerificationReport:
    """ROC/TAR@FAR/AUC over scored pairs (flag 1 = same subject).

    TAR at a requested FAR is linearly interpolated between ROC points, and
    reported only when the impostor count is at least 1/FAR; rarer operating
    points are marked not estimable rather than extrapolated.
    """
    scores = np.asarray(scores, dtype=np.float64)
    genuine_flags = np.asarray(genuine_flags).astype(bool)
    if scores.shape != genuine_flags.shape:
        raise ShapeError("scores and pair flags must have identical shape")
    if not np.all(np.isfinite(scores)):
        raise ConfigError("pair scores must be finite")
    genuine = scores[genuine_flags]
    impostor = scores[~genuine_flags]
    if genuine.size == 0 or impostor.size == 0:
        raise ConfigError("verification needs at least one genuine and one impostor pair")
    far, tar, thresholds = roc_points(genuine, impostor)
    auc = float(np.trapezoid(tar, far))
    tar_at_far: dict[float, float | None] = {}
    for target in far_targets:
        if impostor.size >= 1.0 / target:
            tar_at_far[float(target)] = float(np.interp(target, far, tar))
        else:
            tar_at_far[float(target)] = None
    return VerificationReport(
        far=far,
        tar=tar,
        thresholds=thresholds,
        auc=auc,
        tar_at_far=tar_at_far,
        n_genuine=int(genuine.size),
        n_impostor=int(impostor.size),
    )


def verify_pairs(
    a_values: np.ndarray,
    b_values: np.ndarray,
    same_flags: np.ndarray,
    far_targets=DEFAULT_FAR_TARGETS,
) -> VerificationReport:
    """Cosine-score a list of template pairs, then run verify()."""
    a = np.asarray(a_values, dtype=np.float64)
    bv = np.asarray(b_values, dtype=np.float64)
    if a.shape != bv.shape or a.ndim != 2:
        raise ShapeError("pair template matrices must share shape (P, D)")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(bv, axis=1)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise ConfigError("zero-norm template in verification pairs")
    scores = np.einsum("ij,ij->i", a, bv) / (na * nb)
    return verify(scores, same_flags, far_targets)


def _cpu_description() -> str:
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


@dataclass
class ThroughputReport:
    mode: str
    comparisons_per_second: float
    n_comparisons: int
    seconds: float
    threads: int
    gallery_size: int
    cpu: str = field(default_factory=_cpu_description)
    cores: int = field(default_factory=lambda: os.cpu_count() or 1)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "comparisons_per_second": self.comparisons_per_second,
            "n_comparisons": self.n_comparisons,
            "seconds": self.seconds,
            "threads": self.threads,
            "gallery_size": self.gallery_size,
            "cpu": self.cpu,
            "cores": self.cores,
        }


def bench_throughput(
    gallery: Gallery | DprfsGallery,
    probes,
    mode: str,
    duration_s: float = 3.0,
    threads: int = 1,
) -> ThroughputReport:
    """Sustained template comparisons per second over ~duration_s of matching.

    mode "compact": precomputed-norm dot products of compact templates.
    mode "dprfs": per-patch masked cosine averaging on raw representations.
    A warm-up pass runs before timing; durations below 3 s are for smoke tests.
    """
    if mode == "compact":
        if not isinstance(gallery, Gallery):
            raise ConfigError("compact mode needs a compact-template Gallery")
        probe_list = [np.asarray(p, dtype=np.float32) for p in probes]
        work = lambda p: gallery.similarities(p)  # noqa: E731
    elif mode == "dprfs":
        if not isinstance(gallery, DprfsGallery):
            raise ConfigError("dprfs mode needs a DprfsGallery")
        probe_list = list(probes)
        work = lambda p: dprfs_scores(p, gallery)  # noqa: E731
    else:
        raise ConfigError(f"unknown benchmark mode '{mode}'")
    if not probe_list or len(gallery) == 0:
        raise ConfigError("benchmark needs nonempty probes and gallery")

    for p in probe_list[: min(4, len(probe_list))]:   # warm-up
        work(p)

    per_call = len(gallery)
    done = 0
    idx = 0
    if threads > 1:
        pool = ThreadPoolExecutor(max_workers=threads)
    start = time.perf_counter()
    if threads > 1:
        while time.perf_counter() - start < duration_s:
            batch = [probe_list[(idx + j) % len(probe_list)] for j in range(threads)]
            idx += threads
            list(pool.map(work, batch))
            done += per_call * len(batch)
        elapsed = time.perf_counter() - start
        pool.shutdown()
    else:
        while time.perf_counter() - start < duration_s:
            work(probe_list[idx % len(probe_list)])
            idx += 1
            done += per_call
        elapsed = time.perf_counter() - start
    return ThroughputReport(
        mode=mode,
        comparisons_per_second=done / elapsed,
        n_comparisons=done,
        seconds=elapsed,
        threads=threads,
        gallery_size=len(gallery),
    )
