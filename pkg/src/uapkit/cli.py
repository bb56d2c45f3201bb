"""Operator entry point.

Subcommands: generate, evaluate, zoo list|inspect|apply, toy-train,
plot. Configs are declarative JSON; flags override config scalars.
Exit codes: 0 success, 2 validation failure, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import evalharness, zoo
from .bandit import SelectionStrategy
from .core import Perturbation, Task, ThreatModel, UapkitError, ValidationError, rescale_perturbation
from .data import DatasetManifest
from .encoders import EncoderHandle, SearchSpace, load_builtin_space
from .engine import AttackConfig, AttackTrace, config_digest, run_attack
from .shapes import ShapesSpec

log = logging.getLogger("uapkit.cli")

SCHEMA_VERSION = 1
ZOO_INDEX_ENV = "UAPKIT_ZOO_INDEX"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

_BUILTIN_SPACES = ("base", "mid", "large")

_ATTACK_KEYS = {
    "search_space",
    "surrogate_dataset",
    "threat_model",
    "strategy",
    "k",
    "targeted",
    "target_text",
    "total_steps",
    "epochs",
    "batch_size",
    "step_size",
    "learning_rate",
    "reward_momentum",
    "seed",
    "resolution",
    "checkpoint_every",
    "checkpoint_dir",
    "log_every",
}


def _load_config(path: str | Path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: line {exc.lineno}: {exc.msg}") from exc
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"config {path}: schema_version {data.get('schema_version')!r} != {SCHEMA_VERSION}"
        )
    return data, path.parent


def _resolve(base: Path, ref: str | Path) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base / p


def _load_search_space(ref: str, base: Path) -> SearchSpace:
    if ref in _BUILTIN_SPACES:
        return load_builtin_space(ref)
    return SearchSpace.load(_resolve(base, ref))


def _build_attack_config(cfg: dict, base: Path, args) -> AttackConfig:
    attack = cfg.get("attack")
    if not isinstance(attack, dict):
        raise ValidationError("config missing 'attack' object")
    unknown = set(attack) - _ATTACK_KEYS
    if unknown:
        raise ValidationError(f"unknown attack config keys: {sorted(unknown)}")
    for key in ("search_space", "surrogate_dataset", "threat_model"):
        if key not in attack:
            raise ValidationError(f"attack config missing {key!r}")
    kwargs = {
        k: attack[k]
        for k in (
            "k",
            "targeted",
            "target_text",
            "total_steps",
            "epochs",
            "batch_size",
            "step_size",
            "learning_rate",
            "reward_momentum",
            "seed",
            "checkpoint_every",
            "log_every",
        )
        if k in attack
    }
    if "resolution" in attack:
        kwargs["resolution"] = tuple(attack["resolution"])
    if args.seed is not None:
        kwargs["seed"] = args.seed
    checkpoint_dir = attack.get("checkpoint_dir")
    if checkpoint_dir is not None:
        checkpoint_dir = _resolve(base, checkpoint_dir)
    elif kwargs.get("checkpoint_every", 0) > 0:
        checkpoint_dir = Path(args.out) / "checkpoints"
    if checkpoint_dir is not None:
        kwargs["checkpoint_dir"] = checkpoint_dir
    return AttackConfig(
        search_space=_load_search_space(attack["search_space"], base),
        surrogate_dataset=_resolve(base, attack["surrogate_dataset"]),
        threat_model=ThreatModel.from_dict(attack["threat_model"]),
        strategy=SelectionStrategy.from_dict(attack.get("strategy", {"kind": "ucb"})),
        **kwargs,
    )


def _plot_histogram(hist: dict, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ids = sorted(hist)
    counts = [hist[i] for i in ids]
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(ids) + 2), 3.5))
    ax.bar(range(len(ids)), counts, color="#4878cf")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("times selected")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_loss_curve(records, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r.step for r in records]
    totals = [r.total_loss for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, totals, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_title("optimization trace")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_generate(args) -> int:
    cfg, base = _load_config(args.config)
    config = _build_attack_config(cfg, base, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifact_id = cfg.get("artifact_id", "uap")

    t0 = time.perf_counter()
    perturbation, trace = run_attack(config, resume_from=args.resume)
    wall = time.perf_counter() - t0

    descriptor = zoo.save_perturbation(perturbation, out / f"{artifact_id}.json")
    index = zoo.ZooIndex(base=out)
    zoo.register_artifact(index, descriptor["path"], artifact_id)
    index.save(out / "zoo_index.json")
    trace.write_jsonl(out / "trace.jsonl")

    hist = trace.arm_histogram()
    summary = {
        "artifact_id": artifact_id,
        "artifact": descriptor["path"],
        "digest": descriptor["digest"],
        "config_digest": config_digest(config),
        "steps": len(trace.records),
        "final_total_loss": trace.records[-1].total_loss if trace.records else None,
        "arm_histogram": hist,
        "bandit": trace.final_state.to_dict(),
        "wall_time_s": wall,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if trace.records:
        _plot_histogram(hist, out / "selection_histogram.png", "surrogate selections")
        _plot_loss_curve(trace.records, out / "loss_curve.png")
    print(f"wrote {descriptor['path']} (digest {descriptor['digest'][:12]}...)")
    return EXIT_OK


def _expand_victims(entries, base: Path) -> list[EncoderHandle]:
    victims: list[EncoderHandle] = []
    for entry in entries:
        if not isinstance(entry, dict):
            raise ValidationError(f"victim entry must be an object, got {type(entry).__name__}")
        if "search_space" in entry:
            space = _load_search_space(entry["search_space"], base)
            ids = entry.get("ids")
            handles = space.handles if ids is None else [space.handles[space.index_of(i)] for i in ids]
            victims.extend(handles)
        else:
            victims.append(EncoderHandle.from_dict(entry))
    if not victims:
        raise ValidationError("no victims specified")
    return victims


def cmd_evaluate(args) -> int:
    cfg, base = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    victims = _expand_victims(cfg.get("victims", []), base)
    manifests = [DatasetManifest.load(_resolve(base, m)) for m in cfg.get("datasets", [])]
    if not manifests:
        raise ValidationError("no datasets specified")
    try:
        tasks = [Task(t) for t in cfg.get("tasks", [])]
    except ValueError as exc:
        raise ValidationError(f"unknown task: {exc}") from exc
    if not tasks:
        raise ValidationError("no tasks specified")
    artifact_refs = cfg.get("perturbations", [])
    if not artifact_refs:
        raise ValidationError("no perturbations specified")
    perturbations = [(ref, zoo.load_artifact(_resolve(base, ref))) for ref in artifact_refs]

    trials = int(cfg.get("trials", 50))
    template = cfg.get("target_template", evalharness.TARGET_TEMPLATE)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))

    jobs = []
    for ref, p in perturbations:
        for victim in victims:
            for manifest in manifests:
                for task in tasks:
                    jobs.append(
                        evalharness.EvalJob(
                            task=task,
                            victim=victim,
                            manifest=manifest,
                            perturbation=p,
                            trials=trials,
                            target_template=template,
                            seed=seed,
                        )
                    )
    reports, failures = evalharness.run_matrix(jobs, workers=args.workers)
    evalharness.write_report_json(reports, failures, out / "report.json")
    evalharness.write_report_csv(reports, out / "report.csv")
    if reports:
        asr_by = {f"{r.victim_id}/{r.task.value}": r.asr for r in reports}
        finite = {k: v for k, v in asr_by.items() if v == v}
        if finite:
            _plot_histogram(finite, out / "asr_overview.png", "ASR by victim/task")
    print(f"evaluated {len(reports)} rows, {len(failures)} failures -> {out}")
    return EXIT_RUNTIME if failures else EXIT_OK


def _open_index(args) -> zoo.ZooIndex:
    ref = args.index or os.environ.get(ZOO_INDEX_ENV)
    if not ref:
        raise ValidationError(f"no zoo index: pass --index or set {ZOO_INDEX_ENV}")
    return zoo.ZooIndex.load(ref)


def cmd_zoo_list(args) -> int:
    index = _open_index(args)
    for key in zoo.list_threat_models(index):
        print(key)
        for aid in zoo.list_attackers(index, key):
            print(f"  {aid}")
    return EXIT_OK


def cmd_zoo_inspect(args) -> int:
    if args.artifact:
        path = Path(args.artifact)
        metadata = json.loads(path.read_text())
        zoo.load_artifact(path)
        print(json.dumps(metadata, indent=2, sort_keys=True))
        return EXIT_OK
    index = _open_index(args)
    if not args.threat_model or not args.id:
        raise ValidationError("inspect needs --artifact, or --threat-model with --id")
    bucket = index.entries.get(args.threat_model, {})
    if args.id not in bucket:
        raise zoo.UnknownAttackerError(f"no attacker {args.id!r} under {args.threat_model!r}")
    zoo.load_attacker(index, args.threat_model, args.id)
    print(json.dumps(bucket[args.id], indent=2, sort_keys=True))
    return EXIT_OK


_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _apply_to_images(p: Perturbation, images_dir: Path, out_dir: Path) -> int:
    from PIL import Image

    files = sorted(f for f in images_dir.iterdir() if f.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise ValidationError(f"no images found under {images_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for f in files:
        img = Image.open(f).convert("RGB")
        x = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1)[None]
        p_res = rescale_perturbation(p, (x.shape[2], x.shape[3]))
        y = p_res(x)[0].clamp(0.0, 1.0)
        arr = (y * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
        # PNG keeps the perturbation bound auditable after quantization
        Image.fromarray(arr).save(out_dir / (f.stem + ".png"))
    return len(files)


def cmd_zoo_apply(args) -> int:
    if args.artifact:
        p = zoo.load_artifact(args.artifact)
    else:
        index = _open_index(args)
        if not args.threat_model or not args.id:
            raise ValidationError("apply needs --artifact, or --threat-model with --id")
        p = zoo.load_attacker(index, args.threat_model, args.id)
    n = _apply_to_images(p, Path(args.images), Path(args.out))
    print(f"perturbed {n} images -> {args.out}")
    return EXIT_OK


def cmd_toy_train(args) -> int:
    from .encoders import ToyTrainConfig, train_toy_encoder

    cfg, base = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = cfg.get("encoders")
    if not entries:
        raise ValidationError("toy-train config needs a non-empty 'encoders' list")

    handles = []
    for entry in entries:
        seed = int(entry.get("seed", 0))
        handle_id = entry.get("id", f"toy_s{seed}")
        dataset = ShapesSpec.from_dict(entry.get("dataset", {}))
        train_cfg = ToyTrainConfig(
            dataset=dataset,
            temperature=entry.get("temperature", 0.07),
            batch_size=entry.get("batch_size", 64),
            epochs=entry.get("epochs", 4),
            learning_rate=entry.get("learning_rate", 3e-3),
            embed_dim=entry.get("embed_dim", 32),
            width=entry.get("width", 32),
        )
        path = out / f"{handle_id}.pt"
        handle = train_toy_encoder(train_cfg, seed=seed, save_path=path, handle_id=handle_id)
        handles.append(handle)
        print(f"trained {handle_id} (seed {seed}) -> {path}")
    space = SearchSpace(name=cfg.get("space_name", "toy"), handles=tuple(handles))
    space.save(out / "search_space.json")
    print(f"wrote {out / 'search_space.json'} ({len(handles)} encoders)")
    return EXIT_OK


def cmd_plot(args) -> int:
    records = AttackTrace.read_jsonl(args.trace)
    if not records:
        raise ValidationError(f"no records in {args.trace}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _plot_loss_curve(records, out / "loss_curve.png")
    hist: dict[str, int] = {}
    for r in records:
        for aid in r.chosen:
            hist[aid] = hist.get(aid, 0) + 1
    _plot_histogram(hist, out / "selection_histogram.png", "surrogate selections")
    print(f"wrote plots -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uapkit", description=__doc__)
    parser.add_argument("--log-level", default="WARNING", help="logging level name")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="optimize a perturbation and save it")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--resume", default=None, help="checkpoint file to resume from")
    p_gen.set_defaults(func=cmd_generate)

    p_eval = sub.add_parser("evaluate", help="run an evaluation matrix")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--workers", type=int, default=1)
    p_eval.set_defaults(func=cmd_evaluate)

    p_zoo = sub.add_parser("zoo", help="perturbation registry operations")
    zoo_sub = p_zoo.add_subparsers(dest="zoo_command", required=True)

    p_list = zoo_sub.add_parser("list", help="list threat models and attacker ids")
    p_list.add_argument("--index", default=None)
    p_list.set_defaults(func=cmd_zoo_list)

    p_inspect = zoo_sub.add_parser("inspect", help="dump artifact metadata")
    p_inspect.add_argument("--index", default=None)
    p_inspect.add_argument("--threat-model", default=None)
    p_inspect.add_argument("--id", default=None)
    p_inspect.add_argument("--artifact", default=None, help="inspect a metadata file directly")
    p_inspect.set_defaults(func=cmd_zoo_inspect)

    p_apply = zoo_sub.add_parser("apply", help="perturb a directory of images")
    p_apply.add_argument("--index", default=None)
    p_apply.add_argument("--threat-model", default=None)
    p_apply.add_argument("--id", default=None)
    p_apply.add_argument("--artifact", default=None)
    p_apply.add_argument("--images", required=True)
    p_apply.add_argument("--out", required=True)
    p_apply.set_defaults(func=cmd_zoo_apply)

    p_toy = sub.add_parser("toy-train", help="train file-backed toy encoders")
    p_toy.add_argument("--config", required=True)
    p_toy.add_argument("--out", required=True)
    p_toy.set_defaults(func=cmd_toy_train)

    p_plot = sub.add_parser("plot", help="render plots from a trace file")
    p_plot.add_argument("--trace", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (UapkitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
