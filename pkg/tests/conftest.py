import numpy as np
import pytest

from ogctl.heads import HeadConfig, forward, init_head
from ogctl.numerics import make_rng
from ogctl.records import EmbeddingSet


def small_head(kind="ogctl", n=4, dims=(12, 11, 10, 9), hidden=6, out=8,
               aux_dim=0, dtype=np.float32, seed=0, **kwargs):
    cfg = HeadConfig(
        kind=kind, n_patches=n, patch_dims=dims, hidden=hidden, out_dim=out,
        aux_dim=aux_dim, **kwargs,
    )
    return init_head(cfg, make_rng(seed), dtype=dtype)


def random_batch(params, size, seed=0, mask=None):
    """Random inputs matching a head's configuration."""
    rng = make_rng(seed)
    cfg = params.config
    dtype = params.dtype
    patches = [rng.standard_normal((size, d)).astype(dtype) for d in cfg.patch_dims]
    if mask is None:
        mask = (rng.random((size, cfg.n_patches)) > 0.4).astype(np.uint8)
    aux = (
        rng.standard_normal((size, cfg.aux_dim)).astype(dtype) if cfg.aux_dim else None
    )
    return patches, np.asarray(mask, dtype=np.uint8), aux


def populate_stats(params, seed=99, size=16):
    """Run one train-mode batch so infer mode has running statistics."""
    patches, mask, aux = random_batch(params, size, seed=seed)
    forward(params, patches, mask, aux=aux, mode="train")
    return params


def toy_set(n_ids=4, per_id=4, n=3, d=6, seed=0, mask_fn=None):
    """Tiny hand-rolled EmbeddingSet for trainer/container tests."""
    rng = make_rng(seed)
    k = n_ids * per_id
    occ = np.ones((k, n), dtype=np.uint8)
    if mask_fn is not None:
        for i in range(k):
            occ[i] = mask_fn(i)
    return EmbeddingSet(
        patch_dims=(d,) * n,
        subjects=np.repeat(np.arange(n_ids, dtype=np.int64), per_id),
        medias=np.tile(np.arange(per_id, dtype=np.int64), n_ids),
        occlusion=occ,
        patches=[rng.standard_normal((k, d)).astype(np.float32) for _ in range(n)],
        aux=None,
    )


@pytest.fixture
def rng():
    return make_rng(1234)
