"""Minibatched training of a fusion head plus class projection with Adam.

The loop is deterministic for a fixed seed: shuffling, initialization and the
annealing schedule all derive from one seeded generator whose state is carried
inside checkpoints, so an interrupted run resumed from disk is bit-identical to
an uninterrupted one.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import containers
from .containers import CheckpointPayload
from .errors import ConfigError
from .heads import HeadConfig, HeadParams, Branch, backward, forward, init_head
from .losses import (
    AffineClassifier,
    ClassProjection,
    asoftmax_loss,
    decay_lambda,
    init_affine_classifier,
    init_class_projection,
    renormalize_rows,
    softmax_loss,
)
from .numerics import AdamState, adam_step, make_rng
from .records import EmbeddingSet

LOSS_KINDS = ("asoftmax", "softmax")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    loss: str = "asoftmax"
    head: str = "ogctl"
    out_dim: int = 128
    hidden: int = 64
    omega: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_start: float = 1000.0
    lambda_min: float = 5.0
    lambda_decay: float = 0.1
    monotonic_margin: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    bn_visible_only: bool = False
    checkpoint_path: str | None = None
    checkpoint_every: int = 0          # epochs between mid-run checkpoints, 0 = final only

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 (normalization needs batch statistics)")
        if self.out_dim < 1 or self.hidden < 1:
            raise ConfigError("out_dim and hidden must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss '{self.loss}'")
        if self.omega < 1:
            raise ConfigError("omega must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    accuracy: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
            "checkpoint_path": self.checkpoint_path,
        }


@dataclass
class TrainResult:
    head: HeadParams
    classifier: ClassProjection | AffineClassifier
    report: TrainReport
    label_map: dict[int, int]       # original subject id -> dense class index


@dataclass
class _TrainState:
    config: TrainConfig
    head: HeadParams
    classifier: ClassProjection | AffineClassifier
    adam: AdamState
    rng: np.random.Generator
    label_map: dict[int, int]
    epochs_done: int = 0
    iteration: int = 0


def remap_labels(subjects: np.ndarray) -> tuple[np.ndarray, dict[int, int]]:
    """Dense 0..C-1 class indices in order of first appearance."""
    label_map: dict[int, int] = {}
    dense = np.empty(len(subjects), dtype=np.int64)
    for i, s in enumerate(int(v) for v in subjects):
        if s not in label_map:
            label_map[s] = len(label_map)
        dense[i] = label_map[s]
    return dense, label_map


def _head_config(config: TrainConfig, dataset: EmbeddingSet) -> HeadConfig:
    aux_dim = dataset.aux_dim if config.head == "ogctl_plus" else 0
    if config.head == "ogctl_plus" and aux_dim == 0:
        raise ConfigError("head 'ogctl_plus' needs embeddings with an auxiliary vector")
    return HeadConfig(
        kind=config.head,
        n_patches=dataset.n_patches,
        patch_dims=dataset.patch_dims,
        hidden=config.hidden,
        out_dim=config.out_dim,
        aux_dim=aux_dim,
        bn_eps=config.bn_eps,
        bn_momentum=config.bn_momentum,
        bn_visible_only=config.bn_visible_only,
    )


def _batch_slices(n: int, batch_size: int) -> list[np.ndarray]:
    """Contiguous index blocks; a trailing singleton merges into the previous batch."""
    edges = list(range(0, n, batch_size)) + [n]
    slices = [np.arange(a, b) for a, b in zip(edges[:-1], edges[1:])]
    if len(slices) > 1 and len(slices[-1]) < 2:
        tail = slices.pop()
        slices[-1] = np.concatenate([slices[-1], tail])
    return slices


def _trainable(state: _TrainState) -> dict[str, np.ndarray]:
    params = state.head.trainable()
    params["cls.weight"] = state.classifier.weight
    if isinstance(state.classifier, AffineClassifier):
        params["cls.bias"] = state.classifier.bias
    return params


def _run_epochs(
    state: _TrainState,
    dataset: EmbeddingSet,
    labels: np.ndarray,
    target_epochs: int,
    log,
) -> TrainReport:
    cfg = state.config
    report = TrainReport()
    n = len(dataset)
    while state.epochs_done < target_epochs:
        epoch = state.epochs_done + 1
        t0 = time.perf_counter()
        perm = state.rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for sl in _batch_slices(n, cfg.batch_size):
            idx = perm[sl]
            batch_patches = [p[idx] for p in dataset.patches]
            batch_mask = dataset.occlusion[idx]
            batch_aux = None if dataset.aux is None else dataset.aux[idx]
            y = labels[idx]
            t, cache = forward(
                state.head, batch_patches, batch_mask, aux=batch_aux, mode="train"
            )
            if isinstance(state.classifier, ClassProjection):
                loss, d_t, d_w = asoftmax_loss(t, y, state.classifier)
                grads = {"cls.weight": d_w}
                logits = t @ state.classifier.weight.T
            else:
                loss, d_t, d_w, d_b = softmax_loss(t, y, state.classifier)
                grads = {"cls.weight": d_w, "cls.bias": d_b}
                logits = t @ state.classifier.weight.T + state.classifier.bias
            if not np.isfinite(loss):
                raise ConfigError(f"training diverged: non-finite loss at epoch {epoch}")
            head_grads, _ = backward(state.head, cache, d_t)
            grads.update(head_grads)
            adam_step(_trainable(state), grads, state.adam)
            if isinstance(state.classifier, ClassProjection):
                renormalize_rows(state.classifier.weight)
                decay_lambda(state.classifier, state.iteration)
            state.iteration += 1
            loss_sum += loss * len(idx)
            correct += int((np.argmax(logits, axis=1) == y).sum())
        stats = EpochStats(
            epoch=epoch,
            mean_loss=loss_sum / n,
            accuracy=correct / n,
            seconds=time.perf_counter() - t0,
        )
        state.epochs_done = epoch
        report.epochs.append(stats)
        if log is not None:
            log(json.dumps({"event": "epoch", **dataclasses.asdict(stats)}))
        if (
            cfg.checkpoint_path
            and cfg.checkpoint_every
            and epoch % cfg.checkpoint_every == 0
            and epoch < target_epochs
        ):
            save_checkpoint(cfg.checkpoint_path, state)
            report.checkpoint_path = cfg.checkpoint_path
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, state)
        report.checkpoint_path = cfg.checkpoint_path
    return report


def train(dataset: EmbeddingSet, config: TrainConfig, log=None) -> TrainResult:
    """Run the full training schedule on a dataset of embedding records."""
    config.validate()
    dataset.validate()
    if len(dataset) < 2:
        raise ConfigError("training needs at least 2 records")
    labels, label_map = remap_labels(dataset.subjects)
    n_classes = len(label_map)
    if n_classes < 2:
        raise ConfigError("training needs at least 2 distinct identities")

    rng = make_rng(config.seed)
    head = init_head(_head_config(config, dataset), rng)
    if config.loss == "asoftmax":
        classifier: ClassProjection | AffineClassifier = init_class_projection(
            n_classes,
            config.out_dim,
            rng,
            omega=config.omega,
            lambda_start=config.lambda_start,
            lambda_min=config.lambda_min,
            lambda_decay=config.lambda_decay,
            monotonic=config.monotonic_margin,
        )
    else:
        classifier = init_affine_classifier(n_classes, config.out_dim, rng)
    state = _TrainState(
        config=config,
        head=head,
        classifier=classifier,
        adam=AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps),
        rng=rng,
        label_map=label_map,
    )
    report = _run_epochs(state, dataset, labels, config.epochs, log)
    return TrainResult(head=head, classifier=classifier, report=report, label_map=label_map)


def resume(
    checkpoint_path: str,
    dataset: EmbeddingSet,
    config: TrainConfig | None = None,
    log=None,
) -> TrainResult:
    """Continue training from a checkpoint up to config.epochs total epochs.

    If a config is given, every field except epochs and checkpoint paths must
    match the checkpointed one; the restored run is bit-identical to an
    uninterrupted run of the same total length.
    """
    state = load_checkpoint(checkpoint_path)
    stored = state.config
    if config is not None:
        a = dataclasses.replace(
            config, epochs=0, checkpoint_path=None, checkpoint_every=0
        )
        b = dataclasses.replace(
            stored, epochs=0, checkpoint_path=None, checkpoint_every=0
        )
        if a != b:
            raise ConfigError(
                "resume config mismatch: "
                f"checkpoint was trained with {b.to_dict()}, requested {a.to_dict()}"
            )
        stored = dataclasses.replace(
            stored,
            epochs=config.epochs,
            checkpoint_path=config.checkpoint_path,
            checkpoint_every=config.checkpoint_every,
        )
        state.config = stored
    if stored.epochs < state.epochs_done:
        raise ConfigError(
            f"checkpoint already has {state.epochs_done} epochs, target is {stored.epochs}"
        )
    dataset.validate()
    labels, label_map = remap_labels(dataset.subjects)
    if label_map != state.label_map:
        raise ConfigError("resume dataset identities do not match the checkpoint label map")
    expected = _head_config(stored, dataset)
    if expected != state.head.config:
        raise ConfigError(
            f"resume head mismatch: checkpoint {state.head.config}, dataset/config give {expected}"
        )
    report = _run_epochs(state, dataset, labels, stored.epochs, log)
    return TrainResult(
        head=state.head, classifier=state.classifier, report=report, label_map=state.label_map
    )


def _head_arrays(head: HeadParams) -> dict[str, np.ndarray]:
    out = dict(head.trainable())
    if head.config.gated:
        for i, br in enumerate(head.branches):
            out[f"b{i}.run_mean"] = br.run_mean
            out[f"b{i}.run_var"] = br.run_var
    return out


def save_checkpoint(path: str, state: _TrainState) -> None:
    head_cfg = state.head.config
    meta: dict = {
        "train_config": state.config.to_dict(),
        "head_config": {
            "kind": head_cfg.kind,
            "n_patches": head_cfg.n_patches,
            "patch_dims": list(head_cfg.patch_dims),
            "hidden": head_cfg.hidden,
            "out_dim": head_cfg.out_dim,
            "aux_dim": head_cfg.aux_dim,
            "bn_eps": head_cfg.bn_eps,
            "bn_momentum": head_cfg.bn_momentum,
            "bn_visible_only": head_cfg.bn_visible_only,
        },
        "bn_batches": state.head.bn_batches,
        "epochs_done": state.epochs_done,
        "iteration": state.iteration,
        "adam_step": state.adam.step,
        "label_map": {str(k): v for k, v in state.label_map.items()},
        "rng_state": _jsonable_rng_state(state.rng),
        "classifier_kind": "asoftmax"
        if isinstance(state.classifier, ClassProjection)
        else "softmax",
    }
    arrays: dict[str, np.ndarray] = {}
    for name, arr in _head_arrays(state.head).items():
        arrays[f"head/{name}"] = arr
    arrays["cls/weight"] = state.classifier.weight
    if isinstance(state.classifier, AffineClassifier):
        arrays["cls/bias"] = state.classifier.bias
    else:
        meta["lambda_value"] = state.classifier.lambda_value
    for name, arr in state.adam.m.items():
        arrays[f"adam/m/{name}"] = arr
    for name, arr in state.adam.v.items():
        arrays[f"adam/v/{name}"] = arr
    containers.write_checkpoint(path, CheckpointPayload(meta=meta, arrays=arrays))


def _jsonable_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _restore_rng(meta: dict) -> np.random.Generator:
    if meta["bit_generator"] != "PCG64":
        raise ConfigError(f"unsupported RNG '{meta['bit_generator']}' in checkpoint")
    rng = make_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(meta["state"]), "inc": int(meta["inc"])},
        "has_uint32": meta["has_uint32"],
        "uinteger": meta["uinteger"],
    }
    return rng


def load_checkpoint(path: str) -> _TrainState:
    payload = containers.read_checkpoint(path)
    meta = payload.meta
    try:
        config = TrainConfig.from_dict(meta["train_config"])
        hc = meta["head_config"]
        head_config = HeadConfig(
            kind=hc["kind"],
            n_patches=hc["n_patches"],
            patch_dims=tuple(hc["patch_dims"]),
            hidden=hc["hidden"],
            out_dim=hc["out_dim"],
            aux_dim=hc["aux_dim"],
            bn_eps=hc["bn_eps"],
            bn_momentum=hc["bn_momentum"],
            bn_visible_only=hc["bn_visible_only"],
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint '{path}' metadata incomplete: {exc}") from exc

    branches = []
    for i in range(head_config.n_branches):
        get = lambda suffix: payload.arrays[f"head/b{i}.{suffix}"]  # noqa: E731
        br = Branch(
            w1=get("w1"), b1=get("b1"), slope=get("slope"), w2=get("w2"), b2=get("b2")
        )
        if head_config.gated:
            br.gamma = get("gamma")
            br.beta = get("beta")
            br.run_mean = get("run_mean")
            br.run_var = get("run_var")
        branches.append(br)
    head = HeadParams(config=head_config, branches=branches, bn_batches=meta["bn_batches"])

    if meta["classifier_kind"] == "asoftmax":
        classifier: ClassProjection | AffineClassifier = ClassProjection(
            weight=payload.arrays["cls/weight"],
            omega=config.omega,
            lambda_start=config.lambda_start,
            lambda_min=config.lambda_min,
            lambda_decay=config.lambda_decay,
            lambda_value=meta["lambda_value"],
            monotonic=config.monotonic_margin,
        )
    else:
        classifier = AffineClassifier(
            weight=payload.arrays["cls/weight"], bias=payload.arrays["cls/bias"]
        )

    adam = AdamState(
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        step=meta["adam_step"],
    )
    for name, arr in payload.arrays.items():
        if name.startswith("adam/m/"):
            adam.m[name[len("adam/m/") :]] = arr
        elif name.startswith("adam/v/"):
            adam.v[name[len("adam/v/") :]] = arr

    return _TrainState(
        config=config,
        head=head,
        classifier=classifier,
        adam=adam,
        rng=_restore_rng(meta["rng_state"]),
        label_map={int(k): v for k, v in meta["label_map"].items()},
        epochs_done=meta["epochs_done"],
        iteration=meta["iteration"],
    )
