"""Command-line surface: synth -> train -> encode -> match/eval -> bench.

Every command reads flags, an optional flat key=value config file (flags win
over the file, the file wins over defaults) and emits JSON event lines on
stdout. Outputs are written atomically; a failed run leaves no partial files.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import io
import json
import os
import sys

import numpy as np

from . import containers, evaluation, heads, matching, synthetic, training as train_mod
from .errors import ConfigError, OgctlError
from .matching import DprfsGallery, DprfsTemplate, Gallery, pool_image_set
from .records import EmbeddingSet, TemplateSet


class _UsageError(Exception):
    pass


def log_event(**fields) -> None:
    print(json.dumps(fields), flush=True)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = train_mod.TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="minibatch size")
    p.add_argument("--seed", type=int, default=d.seed, help="RNG seed (bit-reproducible)")
    p.add_argument("--loss", choices=train_mod.LOSS_KINDS, default=d.loss, help="training loss")
    p.add_argument("--head", choices=heads.HEAD_KINDS, default=d.head, help="fusion head kind")
    p.add_argument("--dim", type=int, default=d.out_dim, help="template dimension D")
    p.add_argument("--hidden", type=int, default=d.hidden, help="bottleneck hidden units")
    p.add_argument("--omega", type=int, default=d.omega, help="angular margin multiplier")
    p.add_argument("--lr", type=float, default=d.lr, help="Adam learning rate")
    p.add_argument("--beta1", type=float, default=d.beta1, help="Adam beta1")
    p.add_argument("--beta2", type=float, default=d.beta2, help="Adam beta2")
    p.add_argument("--adam-eps", type=float, default=d.adam_eps, help="Adam epsilon")
    p.add_argument(
        "--lambda-start", type=float, default=d.lambda_start, help="margin annealing start"
    )
    p.add_argument("--lambda-min", type=float, default=d.lambda_min, help="margin annealing floor")
    p.add_argument(
        "--lambda-decay", type=float, default=d.lambda_decay, help="margin annealing decay rate"
    )
    p.add_argument(
        "--literal-margin",
        action="store_true",
        help="use the raw cos(omega*theta) target instead of its monotonic extension",
    )
    p.add_argument("--bn-momentum", type=float, default=d.bn_momentum, help="running-stats momentum")
    p.add_argument("--bn-eps", type=float, default=d.bn_eps, help="normalization epsilon")
    p.add_argument(
        "--bn-visible-only",
        action="store_true",
        help="compute batch statistics over visible rows only",
    )
    p.add_argument(
        "--checkpoint-every",
        type=int,
        default=d.checkpoint_every,
        help="epochs between mid-run checkpoints (0 = final only)",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ogctl",
        description="Occlusion-gated compact template learning, matching and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    def cmd(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(
            name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )
        p.add_argument("--config", default=None, help="flat key=value config file")
        subs[name] = p
        return p

    p = cmd("synth", "generate a synthetic embedding container")
    p.add_argument("--ids", type=int, default=20, help="number of identities")
    p.add_argument("--per-id", type=int, default=10, help="samples per identity")
    p.add_argument("--patches", type=int, default=8, help="patches per face")
    p.add_argument("--dim", type=int, default=512, help="per-patch embedding dimension")
    p.add_argument("--aux-dim", type=int, default=0, help="auxiliary embedding dimension")
    p.add_argument("--sigma", type=float, default=0.05, help="within-identity noise")
    p.add_argument(
        "--profiles",
        default="frontal,profile",
        help="comma list of occlusion profiles (frontal, profile, mask:NNNN...)",
    )
    p.add_argument("--seed", type=int, default=7, help="RNG seed (bit-reproducible)")
    p.add_argument("--out", default="embeddings.ogeb", help="output embedding container")

    p = cmd("train", "train a fusion head on an embedding container")
    p.add_argument("--embeddings", default="embeddings.ogeb", help="input embedding container")
    p.add_argument("--checkpoint", default="checkpoint.ogck", help="output checkpoint")
    p.add_argument("--report", default="train_report.json", help="output per-epoch report")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument(
        "--occlusion-eps", type=float, default=0.7, help="visibility threshold for CSV inputs"
    )
    _add_train_flags(p)

    p = cmd("encode", "encode an embedding container into compact templates")
    p.add_argument("--embeddings", default="embeddings.ogeb", help="input embedding container")
    p.add_argument("--checkpoint", default="checkpoint.ogck", help="trained head checkpoint")
    p.add_argument("--out", default="templates.ogtp", help="output template container")
    p.add_argument(
        "--occlusion-eps", type=float, default=0.7, help="visibility threshold for CSV inputs"
    )

    p = cmd("match", "score one probe template file against one gallery template file")
    p.add_argument("--probe", default="probe.ogtp", help="probe template container")
    p.add_argument("--gallery", default="gallery.ogtp", help="gallery template container")
    p.add_argument("--out", default="scores.csv", help="output score CSV")

    p = cmd("eval", "run an identification or verification protocol")
    p.add_argument(
        "--protocol",
        choices=("identification", "verification"),
        default="identification",
        help="evaluation protocol",
    )
    p.add_argument("--embeddings", default="embeddings.ogeb", help="input embedding container")
    p.add_argument("--checkpoint", default="checkpoint.ogck", help="trained head checkpoint")
    p.add_argument(
        "--probe-templates", default=None, help="pre-encoded probe templates (skips encoding)"
    )
    p.add_argument(
        "--gallery-templates", default=None, help="pre-encoded gallery templates (skips encoding)"
    )
    p.add_argument(
        "--probes",
        choices=("occluded", "all"),
        default="occluded",
        help="which records become probes when splitting an embedding container",
    )
    p.add_argument(
        "--pool",
        choices=("none", "subject"),
        default="none",
        help="average-pool templates per subject before matching",
    )
    p.add_argument("--report", default="report.json", help="output report JSON")
    p.add_argument("--csv", default="report.csv", help="output curve CSV (CMC or ROC)")
    p.add_argument(
        "--occlusion-eps", type=float, default=0.7, help="visibility threshold for CSV inputs"
    )

    p = cmd("bench", "measure matcher throughput")
    p.add_argument("--embeddings", default="embeddings.ogeb", help="input embedding container")
    p.add_argument("--checkpoint", default="checkpoint.ogck", help="trained head checkpoint")
    p.add_argument(
        "--mode",
        choices=("compact", "dprfs", "both"),
        default="both",
        help="which matcher(s) to time",
    )
    p.add_argument("--duration", type=float, default=3.0, help="seconds of matching per figure")
    p.add_argument("--report", default="bench.json", help="output throughput JSON")
    p.add_argument(
        "--occlusion-eps", type=float, default=0.7, help="visibility threshold for CSV inputs"
    )

    return parser, subs


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path) as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise _UsageError(f"{path}:{lineno}: expected key=value, got '{line}'")
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise _UsageError(f"cannot read config file: {exc}") from exc
    return values


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _apply_config_file(subparser: argparse.ArgumentParser, kv: dict[str, str]) -> None:
    actions = {a.dest: a for a in subparser._actions if a.dest != "help"}
    defaults = {}
    for key, value in kv.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise _UsageError(f"unknown config key '{key}'")
        action = actions[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if value.lower() not in _BOOL_WORDS:
                raise _UsageError(f"config key '{key}' needs a boolean, got '{value}'")
            defaults[dest] = _BOOL_WORDS[value.lower()]
        elif action.type is not None:
            try:
                defaults[dest] = action.type(value)
            except ValueError as exc:
                raise _UsageError(f"config key '{key}': {exc}") from exc
        else:
            defaults[dest] = value
        if action.choices and defaults[dest] not in action.choices:
            raise _UsageError(
                f"config key '{key}' must be one of {sorted(action.choices)}"
            )
    subparser.set_defaults(**defaults)


def _load_embeddings(path: str, eps: float) -> EmbeddingSet:
    if path.endswith(".csv"):
        return containers.read_embeddings_csv(path, eps=eps)
    return containers.read_embeddings(path)


def _train_config(args) -> train_mod.TrainConfig:
    cfg = train_mod.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        loss=args.loss,
        head=args.head,
        out_dim=args.dim,
        hidden=args.hidden,
        omega=args.omega,
        lr=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        adam_eps=args.adam_eps,
        lambda_start=args.lambda_start,
        lambda_min=args.lambda_min,
        lambda_decay=args.lambda_decay,
        monotonic_margin=not args.literal_margin,
        bn_momentum=args.bn_momentum,
        bn_eps=args.bn_eps,
        bn_visible_only=args.bn_visible_only,
        checkpoint_path=args.checkpoint,
        checkpoint_every=args.checkpoint_every,
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        raise _UsageError(str(exc)) from exc
    return cfg


def cmd_synth(args) -> int:
    if args.ids < 2 or args.per_id < 1 or args.sigma <= 0:
        raise _UsageError("synth needs --ids >= 2, --per-id >= 1 and --sigma > 0")
    profiles = synthetic.parse_profiles(args.profiles, args.patches)
    dataset = synthetic.generate_synthetic(
        n_identities=args.ids,
        samples_per_identity=args.per_id,
        n_patches=args.patches,
        dim=args.dim,
        sigma=args.sigma,
        profiles=profiles,
        seed=args.seed,
        aux_dim=args.aux_dim,
    )
    containers.write_embeddings(args.out, dataset)
    log_event(
        event="synth",
        out=args.out,
        records=len(dataset),
        identities=args.ids,
        profiles=[p.name for p in profiles],
        seed=args.seed,
    )
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    dataset = _load_embeddings(args.embeddings, args.occlusion_eps)
    if args.resume:
        result = train_mod.resume(args.resume, dataset, config=config, log=print)
    else:
        result = train_mod.train(dataset, config, log=print)
    containers.atomic_write_bytes(
        args.report, json.dumps(result.report.to_dict(), indent=2).encode()
    )
    final = result.report.epochs[-1]
    log_event(
        event="train_done",
        checkpoint=args.checkpoint,
        report=args.report,
        epochs=final.epoch,
        final_loss=final.mean_loss,
        final_accuracy=final.accuracy,
    )
    return 0


def cmd_encode(args) -> int:
    dataset = _load_embeddings(args.embeddings, args.occlusion_eps)
    state = train_mod.load_checkpoint(args.checkpoint)
    templates = heads.encode_set(dataset, state.head)
    n_constant = int((dataset.occlusion.sum(axis=1) == 0).sum())
    containers.write_templates(args.out, templates)
    if n_constant:
        log_event(
            event="warning",
            message="records with every patch occluded encode to the constant template",
            count=n_constant,
        )
    log_event(event="encode", out=args.out, records=len(templates), dim=templates.dim)
    return 0


def cmd_match(args) -> int:
    probe = containers.read_templates(args.probe)
    gallery_set = containers.read_templates(args.gallery)
    gallery = Gallery.build(gallery_set.values, gallery_set.subjects)
    buf = io.StringIO()
    buf.write("probe_index,probe_subject,probe_media,gallery_index,gallery_subject,gallery_media,score\n")
    for i in range(len(probe)):
        sims = gallery.similarities(probe.values[i])
        for j in range(len(gallery)):
            buf.write(
                f"{i},{probe.subjects[i]},{probe.medias[i]},"
                f"{j},{gallery_set.subjects[j]},{gallery_set.medias[j]},{sims[j]:.6f}\n"
            )
    containers.atomic_write_bytes(args.out, buf.getvalue().encode())
    log_event(event="match", out=args.out, pairs=len(probe) * len(gallery))
    return 0


def _split_gallery_probes(
    dataset: EmbeddingSet, templates: TemplateSet, which_probes: str
) -> tuple[TemplateSet, TemplateSet]:
    """Gallery = first fully-visible record per subject; probes per --probes."""
    fully_visible = dataset.occlusion.all(axis=1)
    gallery_rows: list[int] = []
    seen: set[int] = set()
    for i in range(len(dataset)):
        s = int(dataset.subjects[i])
        if fully_visible[i] and s not in seen:
            seen.add(s)
            gallery_rows.append(i)
    if not gallery_rows:
        raise ConfigError("no fully-visible record to build a gallery from")
    gallery_idx = np.asarray(gallery_rows)
    in_gallery = np.zeros(len(dataset), dtype=bool)
    in_gallery[gallery_idx] = True
    if which_probes == "occluded":
        probe_mask = ~dataset.occlusion.all(axis=1)
    else:
        probe_mask = ~in_gallery
    if not probe_mask.any():
        raise ConfigError("no probe records after the gallery/probe split")

    def take(idx) -> TemplateSet:
        return TemplateSet(
            subjects=templates.subjects[idx],
            medias=templates.medias[idx],
            values=templates.values[idx],
        )

    return take(gallery_idx), take(np.nonzero(probe_mask)[0])


def _pool_by_subject(tset: TemplateSet) -> TemplateSet:
    order: list[int] = []
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(int(v) for v in tset.subjects):
        groups.setdefault(s, []).append(i)
        if len(groups[s]) == 1:
            order.append(s)
    values = np.stack([pool_image_set([tset.values[i] for i in groups[s]]) for s in order])
    return TemplateSet(
        subjects=np.asarray(order, dtype=np.int64),
        medias=np.zeros(len(order), dtype=np.int64),
        values=values.astype(np.float32),
    )


def cmd_eval(args) -> int:
    if (args.probe_templates is None) != (args.gallery_templates is None):
        raise _UsageError("--probe-templates and --gallery-templates must be given together")
    if args.probe_templates:
        probe_set = containers.read_templates(args.probe_templates)
        gallery_set = containers.read_templates(args.gallery_templates)
    else:
        dataset = _load_embeddings(args.embeddings, args.occlusion_eps)
        state = train_mod.load_checkpoint(args.checkpoint)
        templates = heads.encode_set(dataset, state.head)
        gallery_set, probe_set = _split_gallery_probes(dataset, templates, args.probes)
    if args.pool == "subject":
        probe_set = _pool_by_subject(probe_set)
        if args.protocol == "verification":
            gallery_set = _pool_by_subject(gallery_set)

    report: dict
    csv_text: str
    if args.protocol == "identification":
        gallery = Gallery.build(gallery_set.values, gallery_set.subjects)
        ident = evaluation.identify(probe_set.values, probe_set.subjects, gallery)
        report = ident.to_dict()
        csv_text = "rank,cmc\n" + "".join(
            f"{k + 1},{v:.6f}\n" for k, v in enumerate(ident.cmc)
        )
        log_event(
            event="eval",
            protocol="identification",
            rank1=ident.rank_accuracy.get(1),
            probes=ident.n_probes,
            excluded=ident.n_excluded,
        )
    else:
        same = probe_set.subjects[:, None] == gallery_set.subjects[None, :]
        a = np.repeat(np.arange(len(probe_set)), len(gallery_set))
        b = np.tile(np.arange(len(gallery_set)), len(probe_set))
        ver = evaluation.verify_pairs(
            probe_set.values[a], gallery_set.values[b], same.reshape(-1)
        )
        report = ver.to_dict()
        csv_text = "threshold,far,tar\n" + "".join(
            f"{t:.6g},{f:.6g},{ta:.6g}\n" for t, f, ta in ver.roc_rows()
        )
        log_event(
            event="eval",
            protocol="verification",
            auc=ver.auc,
            genuine=ver.n_genuine,
            impostor=ver.n_impostor,
        )
    containers.atomic_write_bytes(args.report, json.dumps(report, indent=2).encode())
    containers.atomic_write_bytes(args.csv, csv_text.encode())
    return 0


def cmd_bench(args) -> int:
    dataset = _load_embeddings(args.embeddings, args.occlusion_eps)
    results: dict = {"reports": []}
    threads_all = os.cpu_count() or 1
    if args.mode in ("compact", "both"):
        state = train_mod.load_checkpoint(args.checkpoint)
        templates = heads.encode_set(dataset, state.head)
        gallery = Gallery.build(templates.values, templates.subjects)
        probes = [templates.values[i] for i in range(min(len(templates), 64))]
        for threads in sorted({1, threads_all}):
            rep = evaluation.bench_throughput(
                gallery, probes, "compact", duration_s=args.duration, threads=threads
            )
            results["reports"].append(rep.to_dict())
            log_event(event="bench", **rep.to_dict())
    if args.mode in ("dprfs", "both"):
        dgallery = DprfsGallery.build(dataset)
        dprobes = [
            DprfsTemplate(
                patches=[p[i] for p in dataset.patches], mask=dataset.occlusion[i]
            )
            for i in range(min(len(dataset), 64))
        ]
        for threads in sorted({1, threads_all}):
            rep = evaluation.bench_throughput(
                dgallery, dprobes, "dprfs", duration_s=args.duration, threads=threads
            )
            results["reports"].append(rep.to_dict())
            log_event(event="bench", **rep.to_dict())
    if args.mode == "both":
        compact1 = [
            r for r in results["reports"] if r["mode"] == "compact" and r["threads"] == 1
        ][0]
        dprfs1 = [r for r in results["reports"] if r["mode"] == "dprfs" and r["threads"] == 1][0]
        results["compact_to_dprfs_ratio"] = (
            compact1["comparisons_per_second"] / dprfs1["comparisons_per_second"]
        )
    containers.atomic_write_bytes(args.report, json.dumps(results, indent=2).encode())
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "encode": cmd_encode,
    "match": cmd_match,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            _apply_config_file(subs[args.command], _parse_config_file(args.config))
            args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(json.dumps({"event": "error", "kind": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (OgctlError, OSError) as exc:
        print(json.dumps({"event": "error", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
