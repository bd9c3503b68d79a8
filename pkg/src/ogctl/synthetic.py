"""Synthetic embedding populations for desk-scale experiments.

Each identity gets one unit-norm mean vector per patch; samples are that mean
plus isotropic Gaussian noise. Occluded patches are overwritten with garbage,
never zeros: zeroed patches would accidentally hide the contamination failure
mode of the ungated heads. The garbage is coherent per record: all occluded
patches of one sample carry the content of a single randomly drawn *other*
identity. That mirrors the upstream extractor, where semi-overlapped patches of
one occluded texture region all see the same irrelevant content and embed it
like some face (uncorrelated white noise would make contamination an invisible
no-op at this scale, defeating the point of the ungated-head comparison).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import make_rng
from .records import EmbeddingSet


@dataclass(frozen=True)
class OcclusionProfile:
    name: str
    visible: tuple[int, ...]       # indices of visible patches

    def mask(self, n_patches: int) -> np.ndarray:
        m = np.zeros(n_patches, dtype=np.uint8)
        for i in self.visible:
            if not 0 <= i < n_patches:
                raise ConfigError(f"profile '{self.name}' names patch {i} of {n_patches}")
            m[i] = 1
        return m


def parse_profiles(text: str, n_patches: int) -> list[OcclusionProfile]:
    """Parse a comma-separated profile list.

    Named profiles: "frontal" (all patches visible) and "profile" (first three
    visible, emulating a 90-degree yaw view). Explicit masks are written as
    "mask:10110000" with one 0/1 digit per patch.
    """
    profiles = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token == "frontal":
            profiles.append(OcclusionProfile("frontal", tuple(range(n_patches))))
        elif token == "profile":
            if n_patches < 3:
                raise ConfigError("'profile' needs at least 3 patches")
            profiles.append(OcclusionProfile("profile", (0, 1, 2)))
        elif token.startswith("mask:"):
            bits = token[len("mask:"):]
            if len(bits) != n_patches or set(bits) - {"0", "1"}:
                raise ConfigError(f"mask must be {n_patches} binary digits, got '{bits}'")
            profiles.append(
                OcclusionProfile(token, tuple(i for i, b in enumerate(bits) if b == "1"))
            )
        else:
            raise ConfigError(f"unknown occlusion profile '{token}'")
    if not profiles:
        raise ConfigError("empty occlusion profile set")
    return profiles


def _unit_rows(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate_synthetic(
    n_identities: int,
    samples_per_identity: int,
    n_patches: int = 8,
    dim: int = 512,
    sigma: float = 0.05,
    profiles: list[OcclusionProfile] | None = None,
    seed: int = 0,
    aux_dim: int = 0,
) -> EmbeddingSet:
    """Clustered per-patch embeddings with per-sample occlusion profiles.

    Profiles are assigned round-robin over each identity's samples, so every
    identity sees every profile. The same seed yields a bit-identical set.
    """
    if n_identities < 2:
        raise ConfigError("need at least 2 identities")
    if samples_per_identity < 1:
        raise ConfigError("need at least 1 sample per identity")
    if sigma <= 0:
        raise ConfigError("noise sigma must be positive")
    if profiles is not None and not profiles:
        raise ConfigError("empty occlusion profile set")
    if profiles is None:
        profiles = [OcclusionProfile("frontal", tuple(range(n_patches)))]

    rng = make_rng(seed)
    means = _unit_rows(rng, (n_identities, n_patches, dim))
    aux_means = _unit_rows(rng, (n_identities, aux_dim)) if aux_dim else None

    total = n_identities * samples_per_identity
    subjects = np.repeat(np.arange(n_identities, dtype=np.int64), samples_per_identity)
    medias = np.tile(np.arange(samples_per_identity, dtype=np.int64), n_identities)
    occlusion = np.zeros((total, n_patches), dtype=np.uint8)
    patches = [np.zeros((total, dim), dtype=np.float32) for _ in range(n_patches)]
    aux = np.zeros((total, aux_dim), dtype=np.float32) if aux_dim else None

    row = 0
    for ident in range(n_identities):
        for s in range(samples_per_identity):
            mask = profiles[s % len(profiles)].mask(n_patches)
            occlusion[row] = mask
            # one irrelevant content source per record for all occluded patches
            confuser = int(rng.integers(n_identities - 1))
            confuser += confuser >= ident
            for i in range(n_patches):
                noise = sigma * rng.standard_normal(dim)
                source = ident if mask[i] else confuser
                patches[i][row] = (means[source, i] + noise).astype(np.float32)
            if aux is not None:
                aux[row] = (aux_means[ident] + sigma * rng.standard_normal(aux_dim)).astype(
                    np.float32
                )
            row += 1

    out = EmbeddingSet(
        patch_dims=(dim,) * n_patches,
        subjects=subjects,
        medias=medias,
        occlusion=occlusion,
        patches=patches,
        aux=aux,
    )
    out.validate()
    return out
