"""Command-line interface: build reports, synthetic data, training, eval.

Configuration is a flat dotted-key namespace.  Values come from defaults,
then an optional JSON config file (``--config``), then generic
``--<dotted.key> <value>`` overrides, then the named convenience flags,
in that order.  Every effective value is printed before any compute so a
run is reproducible from its own output.

Exit codes: 0 success, 2 configuration or parse error, 3 data or
compatibility error, 4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    ClassMap,
    Dataset,
    encode_ppm,
    load_dataset,
    remap_dataset,
    remap_to_simple,
    stratified_split,
    synth_generate,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DecodeError,
    IntegrityError,
    NumericsError,
    RoadSurfaceError,
    StackSpecError,
    TrainAbort,
)
from .fbm import FbmConfig, build_classifiers
from .model import (
    DEFAULT_CHANNELS,
    ModelConfig,
    build_model,
    parse_stack_spec,
    preset,
    preset_names,
)
from .report import (
    build_report_csv,
    format_build_report,
    save_confusion_heatmap,
    save_stage_param_chart,
    save_training_curves,
)
from .train import TrainConfig, evaluate, train

_UNSET = object()


def _int(text):
    return int(text)


def _float(text):
    return float(text)


def _opt(caster):
    def parse(text):
        if isinstance(text, str) and text.lower() in ("none", "null", ""):
            return None
        return caster(text)

    return parse


def _str(text):
    return str(text)


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(part) for part in str(text).split(","))


# key -> (caster, default)
SCHEMA = {
    "model.variant": (_opt(_str), None),
    "model.spec": (_opt(_str), None),
    "model.channels": (_opt(_int_list), None),
    "model.resolution": (_opt(_int), None),
    "model.num_classes": (_opt(_int), None),
    "model.output_channel": (_opt(_int), None),
    "model.head_dim": (_int, 32),
    "model.mlp_ratio": (_float, 4.0),
    "model.seed": (_int, 0),
    "fbm.lambda": (_float, 1.0),
    "fbm.k_schedule": (_int_list, (256, 128, 64, 32)),
    "fbm.seed": (_int, 0),
    "train.epochs": (_int, 40),
    "train.batch": (_int, 32),
    "train.base_lr": (_opt(_float), None),
    "train.min_lr": (_float, 0.0),
    "train.weight_decay": (_float, 0.05),
    "train.warmup_steps": (_int, 0),
    "train.seed": (_int, 0),
    "train.target_top1": (_opt(_float), None),
    "data.dir": (_opt(_str), None),
    "data.train_fraction": (_float, 0.8),
    "data.split_seed": (_opt(_int), None),
    "synth.classes": (_int, 5),
    "synth.per_class": (_int, 20),
    "synth.resolution": (_int, 32),
    "synth.seed": (_int, 0),
    "eval.checkpoint": (_opt(_str), None),
    "eval.batch": (_int, 64),
    "eval.simple": (_opt(_str), None),
    "out.dir": (_opt(_str), None),
}


def default_config() -> dict:
    return {key: default for key, (_, default) in SCHEMA.items()}


def _set_key(config: dict, key: str, value, problems: list) -> None:
    if key not in SCHEMA:
        problems.append(f"unknown configuration key {key!r}")
        return
    caster, _ = SCHEMA[key]
    try:
        config[key] = caster(value)
    except (TypeError, ValueError) as exc:
        problems.append(f"bad value for {key}: {exc}")


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config file {path} is not valid JSON: {exc}"])
    if not isinstance(doc, dict):
        raise ConfigError([f"config file {path} must hold a JSON object"])
    return doc


def parse_override_tokens(tokens) -> list[tuple[str, str]]:
    """Leftover argv as ``--dotted.key value`` pairs."""
    pairs = []
    problems = []
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or "." not in token:
            problems.append(f"unrecognized argument {token!r}")
            i += 1
            continue
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            pairs.append((key, value))
            i += 1
            continue
        if i + 1 >= len(tokens):
            problems.append(f"flag --{key} is missing a value")
            break
        pairs.append((key, tokens[i + 1]))
        i += 2
    if problems:
        raise ConfigError(problems)
    return pairs


def assemble_config(args, overrides) -> dict:
    config = default_config()
    problems: list[str] = []
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            _set_key(config, key, value, problems)
    for key, value in overrides:
        _set_key(config, key, value, problems)
    for key, value in vars(args).items():
        if key.startswith("cfg__") and value is not _UNSET:
            _set_key(config, key[len("cfg__"):].replace("__", "."),
                     value, problems)
    if problems:
        raise ConfigError(problems)
    return config


def print_effective(config: dict, keys=None) -> None:
    for key in sorted(keys if keys is not None else config):
        print(f"config {key} = {config[key]}")


def _model_config(config: dict, num_classes_override=None) -> tuple[ModelConfig, str | None]:
    """Resolve (ModelConfig, variant name or None) from dotted keys."""
    variant = config["model.variant"]
    spec_text = config["model.spec"]
    if variant is None and spec_text is None:
        raise ConfigError(
            ["one of model.variant or model.spec must be given"]
        )
    if variant is not None and spec_text is not None:
        raise ConfigError(
            ["model.variant and model.spec are mutually exclusive"]
        )
    num_classes = num_classes_override
    if num_classes is None:
        num_classes = config["model.num_classes"]
    if variant is not None:
        if variant not in preset_names():
            raise ConfigError(
                [f"unknown variant {variant!r}, expected one of "
                 f"{', '.join(preset_names())}"]
            )
        model_config = preset(
            variant,
            num_classes=num_classes,
            input_resolution=config["model.resolution"],
        )
        return model_config, variant
    channels = config["model.channels"] or DEFAULT_CHANNELS
    stack = parse_stack_spec(spec_text, channels=channels)
    model_config = ModelConfig(
        stack=stack,
        num_classes=num_classes if num_classes is not None else 27,
        input_resolution=config["model.resolution"] or 224,
        head_dim=config["model.head_dim"],
        mlp_ratio=config["model.mlp_ratio"],
        output_channel=config["model.output_channel"] or 768,
    )
    return model_config, None


_BUILD_KEYS = ("model.variant", "model.spec", "model.channels",
               "model.resolution", "model.num_classes",
               "model.output_channel", "model.head_dim", "model.mlp_ratio",
               "model.seed", "out.dir")


def cmd_build(args, overrides) -> int:
    config = assemble_config(args, overrides)
    print_effective(config, _BUILD_KEYS)
    model_config, variant = _model_config(config)
    model = build_model(model_config, seed=config["model.seed"])
    print(format_build_report(model, variant))
    out_dir = config["out.dir"]
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(build_report_csv(model))
        save_stage_param_chart(model, out / "stage_params.png")
        print(f"wrote {out / 'report.csv'} and {out / 'stage_params.png'}")
    return 0


_SYNTH_KEYS = ("synth.classes", "synth.per_class", "synth.resolution",
               "synth.seed", "out.dir")


def cmd_synth(args, overrides) -> int:
    config = assemble_config(args, overrides)
    print_effective(config, _SYNTH_KEYS)
    out_dir = config["out.dir"]
    if not out_dir:
        raise ConfigError(["out.dir is required for synth"])
    dataset = synth_generate(
        num_classes=config["synth.classes"],
        per_class=config["synth.per_class"],
        resolution=config["synth.resolution"],
        seed=config["synth.seed"],
    )
    out = Path(out_dir)
    count = 0
    per_class_counter: dict[int, int] = {}
    for image in dataset.images:
        name = dataset.class_map.name_for(image.label)
        class_dir = out / name
        class_dir.mkdir(parents=True, exist_ok=True)
        index = per_class_counter.get(image.label, 0)
        per_class_counter[image.label] = index + 1
        (class_dir / f"img{index:04d}.ppm").write_bytes(
            encode_ppm(image.pixels)
        )
        count += 1
    (out / "class_map.json").write_text(dataset.class_map.to_json())
    print(f"wrote {count} images across "
          f"{len(dataset.class_map.names)} class directories in {out}")
    return 0


def _load_train_dataset(config: dict, resolution: int) -> Dataset:
    root = config["data.dir"]
    if not root:
        raise ConfigError(["data.dir is required for train"])
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    names = tuple(sorted(p.name for p in root.iterdir() if p.is_dir()))
    if not names:
        raise DataError(f"dataset root {root} has no class directories")
    return load_dataset(root, ClassMap(names), resolution)


_TRAIN_KEYS = ("model.variant", "model.spec", "model.channels",
               "model.resolution", "model.num_classes", "model.head_dim",
               "model.mlp_ratio", "model.output_channel", "model.seed",
               "fbm.lambda", "fbm.k_schedule", "fbm.seed",
               "train.epochs", "train.batch", "train.base_lr",
               "train.min_lr", "train.weight_decay", "train.warmup_steps",
               "train.seed", "train.target_top1",
               "data.dir", "data.train_fraction", "data.split_seed",
               "out.dir")


def cmd_train(args, overrides) -> int:
    config = assemble_config(args, overrides)
    print_effective(config, _TRAIN_KEYS)
    out_dir = config["out.dir"]
    if not out_dir:
        raise ConfigError(["out.dir is required for train"])

    probe_config, variant = _model_config(config)
    resolution = probe_config.input_resolution
    dataset = _load_train_dataset(config, resolution)
    data_classes = len(dataset.class_map.names)
    explicit = config["model.num_classes"]
    if explicit is not None and explicit != data_classes:
        raise DataError(
            f"model.num_classes is {explicit} but the dataset has "
            f"{data_classes} class directories"
        )
    model_config, variant = _model_config(
        config, num_classes_override=data_classes
    )

    train_config = TrainConfig(
        epochs=config["train.epochs"],
        batch=config["train.batch"],
        base_lr=config["train.base_lr"],
        min_lr=config["train.min_lr"],
        weight_decay=config["train.weight_decay"],
        warmup_steps=config["train.warmup_steps"],
        fbm_weight=config["fbm.lambda"],
        seed=config["train.seed"],
        target_top1=config["train.target_top1"],
    )
    base_lr = train_config.resolved_base_lr()
    print(f"effective base lr = {base_lr} for batch {train_config.batch}")

    split_seed = config["data.split_seed"]
    if split_seed is None:
        split_seed = config["train.seed"]
    train_set, val_set = stratified_split(
        dataset, config["data.train_fraction"], split_seed
    )
    print(f"split: {len(train_set)} train / {len(val_set)} held-out "
          f"(fraction {config['data.train_fraction']}, seed {split_seed})")

    model = build_model(model_config, seed=config["model.seed"])
    print(f"model: {model.count_params():,} parameters"
          + (f" (variant {variant})" if variant else ""))

    classifiers = None
    fbm_config = None
    if config["fbm.lambda"] > 0:
        fbm_config = FbmConfig(
            k_schedule=config["fbm.k_schedule"],
            num_classes=data_classes,
            loss_weight=config["fbm.lambda"],
        )
        classifiers = build_classifiers(
            [s.channels for s in model_config.stack.stages],
            data_classes, seed=config["fbm.seed"],
        )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(
        json.dumps({k: _jsonable(config[k]) for k in _TRAIN_KEYS}, indent=2)
    )

    log_path = out / "log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_file:
        def on_record(record):
            log_file.write(json.dumps(record) + "\n")

        result = train(model, train_set, train_config,
                       classifiers=classifiers, fbm_config=fbm_config,
                       on_record=on_record)

    print(f"trained {result.steps} steps, final train top-1 = "
          f"{result.final_train_top1:.4f}"
          + (" (stopped early at target)" if result.stopped_early else ""))

    val_report = evaluate(model, val_set, batch=config["eval.batch"])
    metrics_doc = json.loads(val_report.to_json())
    metrics_doc["train_top1"] = result.final_train_top1
    (out / "metrics.json").write_text(json.dumps(metrics_doc, indent=2))
    (out / "confusion.csv").write_text(
        val_report.confusion_csv(list(dataset.class_map.names))
    )
    save_training_curves(result.records, out / "training_curves.png")
    save_confusion_heatmap(val_report.confusion, dataset.class_map.names,
                           out / "confusion_matrix.png")
    save_checkpoint(
        out / "checkpoint.bin", model, optimizer=result.optimizer,
        classifiers=classifiers, fbm_config=fbm_config,
        class_map=dataset.class_map, step=result.steps, metrics=metrics_doc,
    )
    print(f"held-out top-1 = {val_report.top1:.4f}, macro F1 = "
          f"{val_report.macro_f1:.4f}")
    print(f"wrote checkpoint.bin, log.jsonl, metrics.json, confusion.csv, "
          f"training_curves.png, confusion_matrix.png in {out}")
    return 0


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    return value


_EVAL_KEYS = ("eval.checkpoint", "eval.batch", "eval.simple", "data.dir",
              "out.dir")


def cmd_eval(args, overrides) -> int:
    config = assemble_config(args, overrides)
    print_effective(config, _EVAL_KEYS)
    ckpt_path = config["eval.checkpoint"]
    data_dir = config["data.dir"]
    out_dir = config["out.dir"]
    problems = [f"{key} is required for eval"
                for key, value in (("eval.checkpoint", ckpt_path),
                                   ("data.dir", data_dir),
                                   ("out.dir", out_dir))
                if not value]
    if problems:
        raise ConfigError(problems)

    try:
        bundle = load_checkpoint(ckpt_path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {ckpt_path}")
    model = bundle.model
    resolution = model.config.input_resolution

    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    names = tuple(sorted(p.name for p in root.iterdir() if p.is_dir()))
    if not names:
        raise DataError(f"dataset root {root} has no class directories")

    simple = config["eval.simple"] is not None
    if simple:
        remap = {name: remap_to_simple(name) for name in names}
        dataset = load_dataset(root, ClassMap(names, remap), resolution)
        dataset = remap_dataset(dataset)
    else:
        if bundle.class_map is not None:
            expected = set(bundle.class_map.names)
            if set(names) != expected:
                raise DataError(
                    "dataset class directories "
                    f"{sorted(set(names) - expected)} do not match the "
                    f"checkpoint classes {sorted(expected - set(names))}"
                )
            dataset = load_dataset(root, bundle.class_map, resolution)
        else:
            dataset = load_dataset(root, ClassMap(names), resolution)

    data_classes = len(dataset.class_map.names)
    if data_classes != model.config.num_classes:
        raise DataError(
            f"checkpoint expects {model.config.num_classes} classes but "
            f"the dataset resolves to {data_classes}"
        )

    report = evaluate(model, dataset, batch=config["eval.batch"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "confusion.csv").write_text(
        report.confusion_csv(list(dataset.class_map.names))
    )
    save_confusion_heatmap(report.confusion, dataset.class_map.names,
                           out / "confusion_matrix.png")
    print(f"top-1 = {report.top1:.4f}, macro precision = "
          f"{report.macro_precision:.4f}, macro recall = "
          f"{report.macro_recall:.4f}, macro F1 = {report.macro_f1:.4f}")
    print(f"wrote metrics.json, confusion.csv, confusion_matrix.png in {out}")
    return 0


def _add_config_flag(parser):
    parser.add_argument("--config", default=None,
                        help="JSON config file with flat dotted keys")


def _flag(parser, name, key, **kwargs):
    dest = "cfg__" + key.replace(".", "__")
    parser.add_argument(name, dest=dest, default=_UNSET, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadsurface",
        description="Hybrid convolution-attention road surface classifier",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="construct a model and report it")
    _add_config_flag(p_build)
    _flag(p_build, "--variant", "model.variant",
          help="preset name: " + ", ".join(preset_names()))
    _flag(p_build, "--spec", "model.spec", help="stacking pattern string")
    _flag(p_build, "--resolution", "model.resolution")
    _flag(p_build, "--num-classes", "model.num_classes")
    _flag(p_build, "--out", "out.dir", help="write report.csv and figures")
    p_build.set_defaults(func=cmd_build)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_config_flag(p_synth)
    _flag(p_synth, "--out", "out.dir")
    _flag(p_synth, "--classes", "synth.classes")
    _flag(p_synth, "--per-class", "synth.per_class")
    _flag(p_synth, "--resolution", "synth.resolution")
    _flag(p_synth, "--seed", "synth.seed")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train on a class-directory tree")
    _add_config_flag(p_train)
    _flag(p_train, "--data", "data.dir")
    _flag(p_train, "--out", "out.dir")
    _flag(p_train, "--variant", "model.variant")
    _flag(p_train, "--spec", "model.spec")
    _flag(p_train, "--resolution", "model.resolution")
    _flag(p_train, "--epochs", "train.epochs")
    _flag(p_train, "--batch", "train.batch")
    _flag(p_train, "--base-lr", "train.base_lr")
    _flag(p_train, "--warmup", "train.warmup_steps")
    _flag(p_train, "--fbm-lambda", "fbm.lambda")
    _flag(p_train, "--seed", "train.seed")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_flag(p_eval)
    _flag(p_eval, "--checkpoint", "eval.checkpoint")
    _flag(p_eval, "--data", "data.dir")
    _flag(p_eval, "--out", "out.dir")
    _flag(p_eval, "--batch", "eval.batch")
    p_eval.add_argument("--simple", action="store_const", const="yes",
                        default=_UNSET, dest="cfg__eval__simple",
                        help="remap directory names to the five coarse "
                             "surface conditions")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, leftover = parser.parse_known_args(argv)
        overrides = parse_override_tokens(leftover)
        return args.func(args, overrides)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 2
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"error: {violation}", file=sys.stderr)
        return 2
    except (StackSpecError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, DecodeError, IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (TrainAbort, NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def console_main() -> None:
    raise SystemExit(main(sys.argv[1:]))
