"""Command-line entry point.

Subcommands: gen-data, pretrain, continue-pretrain, finetune, compare,
attnmap, reconstruct, export-curves. Runs are driven by a strict-schema JSON
config (--config); --set key=value overrides dotted paths, --seed overrides
the run seed. Every run echoes its resolved config into --out and writes
nothing outside it. Exit codes: 0 success, 1 runtime failure, 2 usage error,
3 config schema violation. MIMCSPT_REFERENCE_MODE=1 forces single-threaded
deterministic execution.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .evaluation import (
    StrategyArm,
    export_curves,
    render_attention_map,
    render_reconstruction_panel,
    run_comparison,
)
from .model import VitConfig
from .pipeline import HeadSpec, StageConfig, reference_mode, run_stage
from .ppm import bytes_to_image, read_ppm
from .synth import DomainSpec, gen_synthetic_domain

__all__ = ["main", "run_cli", "ConfigError"]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


class ConfigError(ValueError):
    """Config schema violation; the message names the offending dotted key."""


# -- strict schema ---------------------------------------------------------------

_MODEL_KEYS = {"image_size": int, "patch_size": int, "dim": int, "depth": int,
               "heads": int, "decoder_dim": int, "decoder_depth": int,
               "decoder_heads": int, "mlp_ratio": int}

_STAGE_KEYS = {"corpus": list, "epochs": int, "batch_size": int, "base_lr": float,
               "betas": list, "weight_decay": float, "warmup_epochs": int,
               "mask_ratio": float, "init_checkpoint": str, "head": dict,
               "label_smoothing": float, "mixup_alpha": float, "augment": bool,
               "scale_range": list, "eval_corpus": str, "carry_schedule": bool,
               "layer_lr_decay": float, "stage_id": str}

_HEAD_KEYS = {"kind": str, "classes": int}

_DATA_KEYS = {"kind": str, "classes": int, "image_size": int, "shapes": list,
              "clutter": float, "scale_range": list, "texture_seed": int,
              "count": int, "labeled": bool, "split": str, "corpus_id": str}

_EVAL_KEYS = {"arms": list, "seeds": list}

_ATTNMAP_KEYS = {"checkpoint": str, "image": str, "ref_patch": int}

_RECONSTRUCT_KEYS = {"checkpoint": str, "images": list, "mask_ratio": float,
                     "panel_seed": int}

_CURVES_KEYS = {"streams": list}

_TOP_KEYS = {"seed": int, "model": dict, "stage": dict, "data": dict, "eval": dict,
             "attnmap": dict, "reconstruct": dict, "curves": dict}

_NUMERIC_OK = {float: (int, float), int: (int,)}


def _check_section(section: dict, allowed: dict, prefix: str) -> None:
    for key, value in section.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {prefix}{key}")
        want = allowed[key]
        if value is None:
            continue
        ok_types = _NUMERIC_OK.get(want, (want,))
        if not isinstance(value, ok_types) or isinstance(value, bool) and want is not bool:
            raise ConfigError(f"config key {prefix}{key} must be {want.__name__}")


def validate_config(doc: dict, command: str) -> None:
    """Strict validation: unknown keys and missing required keys are exit-3 errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_section(doc, _TOP_KEYS, "")
    if "model" in doc:
        _check_section(doc["model"], _MODEL_KEYS, "model.")
    if "stage" in doc:
        _check_section(doc["stage"], _STAGE_KEYS, "stage.")
        if doc["stage"].get("head") is not None:
            _check_section(doc["stage"]["head"], _HEAD_KEYS, "stage.head.")
    if "data" in doc:
        _check_section(doc["data"], _DATA_KEYS, "data.")
    if "eval" in doc:
        _check_section(doc["eval"], _EVAL_KEYS, "eval.")
    if "attnmap" in doc:
        _check_section(doc["attnmap"], _ATTNMAP_KEYS, "attnmap.")
    if "reconstruct" in doc:
        _check_section(doc["reconstruct"], _RECONSTRUCT_KEYS, "reconstruct.")
    if "curves" in doc:
        _check_section(doc["curves"], _CURVES_KEYS, "curves.")

    def need(path: str):
        node = doc
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node or node[part] is None:
                raise ConfigError(f"missing required config key {path}")
            node = node[part]

    if command in ("pretrain", "continue-pretrain", "finetune"):
        need("model.image_size")
        need("model.patch_size")
        need("stage.corpus")
    if command in ("continue-pretrain", "finetune"):
        need("stage.init_checkpoint")
    if command == "finetune":
        need("stage.head.kind")
        need("stage.head.classes")
    if command == "compare":
        need("model.image_size")
        need("model.patch_size")
        need("eval.arms")
        need("eval.seeds")
    if command == "gen-data":
        need("data.kind")
        need("data.count")
    if command == "attnmap":
        need("model.image_size")
        need("model.patch_size")
        need("attnmap.checkpoint")
        need("attnmap.image")
        need("attnmap.ref_patch")
    if command == "reconstruct":
        need("model.image_size")
        need("model.patch_size")
        need("reconstruct.checkpoint")
        need("reconstruct.images")
    if command == "export-curves":
        need("curves.streams")


def apply_override(doc: dict, assignment: str) -> None:
    """--set dotted.path=value; values parse as JSON, falling back to string."""
    if "=" not in assignment:
        raise ConfigError(f"--set needs key=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {path} crosses a non-object at {part}")
    node[parts[-1]] = value


def _build_model(doc: dict) -> VitConfig:
    return VitConfig(**doc.get("model", {}))


def _build_stage(doc: dict, role: str, seed: int) -> StageConfig:
    spec = dict(doc.get("stage", {}))
    head = spec.pop("head", None)
    if head is not None:
        head = HeadSpec(**head)
    if "betas" in spec and spec["betas"] is not None:
        spec["betas"] = tuple(spec["betas"])
    if "scale_range" in spec and spec["scale_range"] is not None:
        spec["scale_range"] = tuple(spec["scale_range"])
    return StageConfig(role=role, head=head, seed=seed, **spec)


def _echo_config(doc: dict, command: str, out_dir: str) -> None:
    resolved = {"command": command, "config": doc}
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(resolved, f, sort_keys=True, indent=2)
        f.write("\n")


def _cmd_gen_data(doc: dict, out_dir: str, seed: int) -> None:
    data = dict(doc["data"])
    count = data.pop("count")
    labeled = data.pop("labeled", True)
    split = data.pop("split", "train")
    corpus_id = data.pop("corpus_id", None)
    spec = DomainSpec.from_dict(data)
    gen_synthetic_domain(spec, count, seed=seed, out_dir=out_dir,
                         corpus_id=corpus_id, split=split, labeled=labeled)


def _cmd_stage(doc: dict, role: str, out_dir: str, seed: int) -> None:
    config = _build_model(doc)
    stage = _build_stage(doc, role, seed)
    run_stage(stage, config, out_dir)


def _cmd_compare(doc: dict, out_dir: str, jobs: int) -> None:
    config = _build_model(doc)
    arms = []
    for arm_doc in doc["eval"]["arms"]:
        chain = []
        for st in arm_doc["chain"]:
            st = dict(st)
            if st.get("head") is not None:
                st["head"] = HeadSpec(**st["head"])
            chain.append(st)
        arms.append(StrategyArm(arm_id=arm_doc["arm_id"], chain=tuple(chain)))
    run_comparison(arms, doc["eval"]["seeds"], config, out_dir, jobs=jobs)


def _cmd_attnmap(doc: dict, out_dir: str) -> None:
    config = _build_model(doc)
    spec = doc["attnmap"]
    ck = load_checkpoint(spec["checkpoint"])
    image = bytes_to_image(read_ppm(spec["image"]))
    render_attention_map(ck, image, int(spec["ref_patch"]), config,
                         os.path.join(out_dir, "attention.ppm"))


def _cmd_reconstruct(doc: dict, out_dir: str) -> None:
    config = _build_model(doc)
    spec = doc["reconstruct"]
    ck = load_checkpoint(spec["checkpoint"])
    images = np.stack([bytes_to_image(read_ppm(p)) for p in spec["images"]])
    render_reconstruction_panel(ck, images, config,
                                os.path.join(out_dir, "panel.ppm"),
                                mask_ratio=spec.get("mask_ratio", 0.75),
                                seed=spec.get("panel_seed", 0))


def _cmd_export_curves(doc: dict, out_dir: str) -> None:
    export_curves(doc["curves"]["streams"], os.path.join(out_dir, "curves.csv"))


_ROLE_FOR = {"pretrain": "pretrain", "continue-pretrain": "continue",
             "finetune": "finetune"}


def run_cli(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="mimcspt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "pretrain", "continue-pretrain", "finetune",
                 "compare", "attnmap", "reconstruct", "export-curves"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override run seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel arm workers")
        p.add_argument("--dry-run", action="store_true",
                       help="validate config and print the plan, touch nothing")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config path")

    args = parser.parse_args(argv)

    try:
        with open(args.config) as f:
            doc = json.load(f)
    except FileNotFoundError:
        print(f"error: ConfigError: config file not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: ConfigError: config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        for assignment in args.set:
            apply_override(doc, assignment)
        if args.seed is not None:
            doc["seed"] = args.seed
        validate_config(doc, args.command)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    seed = int(doc.get("seed", 0))
    jobs = 1 if reference_mode() else max(1, args.jobs)

    if args.dry_run:
        plan = {"command": args.command, "out": args.out, "seed": seed,
                "jobs": jobs, "config": doc}
        print(json.dumps(plan, sort_keys=True, indent=2))
        return EXIT_OK

    try:
        os.makedirs(args.out, exist_ok=True)
        _echo_config(doc, args.command, args.out)
        if args.command == "gen-data":
            _cmd_gen_data(doc, args.out, seed)
        elif args.command in _ROLE_FOR:
            _cmd_stage(doc, _ROLE_FOR[args.command], args.out, seed)
        elif args.command == "compare":
            _cmd_compare(doc, args.out, jobs)
        elif args.command == "attnmap":
            _cmd_attnmap(doc, args.out)
        elif args.command == "reconstruct":
            _cmd_reconstruct(doc, args.out)
        elif args.command == "export-curves":
            _cmd_export_curves(doc, args.out)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
