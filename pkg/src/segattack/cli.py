"""``segattack`` command line.

Exit codes: 0 ok, 2 config error, 3 model/weights error, 4 numeric error,
5 no transfer cell succeeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .adapters import LAYER_REGISTRY, is_toy, list_models, load_model, recommended_layer
from .config import build_config, describe_defaults, read_config_file
from .datax import (
    DESK_EPOCHS,
    SynthSpec,
    desk_preset,
    generate_synthetic,
    load_cityscapes,
    load_instance_map,
    load_manifest,
    load_voc,
    train_toy,
)
from .errors import ConfigError, SegAttackError
from .evalx import (
    attack_dataset,
    derive_seed,
    evaluate,
    quantize,
    run_transfer,
    similarity_map,
    sweep,
)

log = logging.getLogger("segattack")

TOY_MODELS = ("toy-cnn-a", "toy-cnn-b")
TRAIN_DEFAULTS = {"epochs": DESK_EPOCHS, "lr": 3e-3, "batch_size": 16}

_DATA_KEYS = {"dataset", "dataset_format", "split", "max_images", "weights", "out", "seed"}
RELEVANT = {
    "attack": _DATA_KEYS | {"sources", "attacks"},
    "transfer": _DATA_KEYS | {"sources", "targets", "attacks", "workers", "quantized", "metric"},
    "sweep": _DATA_KEYS | {"sources", "targets", "attacks", "workers", "quantized", "sweep"},
    "simmap": _DATA_KEYS | {"sources", "attacks", "simmap"},
    "synth": {"out", "seed"},
    "train": {"dataset", "out", "seed", "train"},
    "list-models": set(),
}


# --- shared helpers -------------------------------------------------------------


def _load_dataset(cfg):
    if not cfg.dataset:
        raise ConfigError("no dataset given (set `dataset` or pass --data)")
    root = Path(cfg.dataset)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist")
    if cfg.dataset_format == "voc":
        ds = load_voc(root, cfg.split)
    elif cfg.dataset_format == "cityscapes":
        ds = load_cityscapes(root, cfg.split)
    else:
        ds = load_manifest(root)
    if cfg.max_images:
        ds = ds.subset(cfg.max_images)
    if len(ds) == 0:
        raise ConfigError(f"dataset {root} has no images")
    return ds


def _load(model_id, cfg, dataset=None):
    weights = cfg.weights.get(model_id)
    if weights is None and is_toy(model_id):
        log.warning("%s has no weights: using its untrained initialization", model_id)
    n_cls = None if is_toy(model_id) or dataset is None else dataset.num_classes
    return load_model(model_id, weights, n_cls)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, default=str)
    return path


def _save_png(x: torch.Tensor, path: Path):
    arr = (quantize(x).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def _echo(cfg) -> dict:
    return {"run_config": cfg.resolved(), "seed": cfg.seed, "version": __version__}


def _single_spec(cfg):
    specs = cfg.attack_specs()
    if len(specs) != 1:
        raise ConfigError(f"this command needs exactly one attack, got {[s.title for s in specs]}")
    return specs[0]


# --- commands ------------------------------------------------------------------------


def cmd_attack(cfg, args) -> int:
    from .plotting import plot_trace

    if len(cfg.sources) != 1:
        raise ConfigError("attack needs exactly one source model")
    spec = _single_spec(cfg)
    ds = _load_dataset(cfg)
    model = _load(cfg.sources[0], cfg, ds)
    out = Path(cfg.out)
    (out / "adv").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    stems = ds.stems if hasattr(ds, "stems") else [f"{i:05d}" for i in range(len(ds))]
    records = []

    def on_trace(i, trace, seed):
        records.append(trace.records)
        _write_json(out / "traces" / f"{stems[i]}.json",
                    {"image": stems[i], "seed": seed, "records": trace.records,
                     "warnings": trace.warnings, **_echo(cfg)})

    advs = attack_dataset(model, spec, ds, on_trace=on_trace)
    for stem, a in zip(stems, advs):
        _save_png(a, out / "adv" / f"{stem}.png")
    clean = evaluate(model, ds)
    adv = evaluate(model, ds, advs)
    adv_q = evaluate(model, ds, [quantize(a) for a in advs])
    summary = {
        "model": model.metadata(),
        "attack": spec.to_json(),
        "images": len(ds),
        "clean_miou": clean.miou,
        "adv_miou": adv.miou,
        "adv_miou_quantized": adv_q.miou,
        "per_class_iou": adv.per_class_iou,
        **_echo(cfg),
    }
    _write_json(out / "summary.json", summary)
    plot_trace(records, out / "trace.png")
    print(f"{model.model_id} {spec.title}: clean {100 * clean.miou:.2f}  adv {100 * adv.miou:.2f}  "
          f"adv (8-bit) {100 * adv_q.miou:.2f}  -> {out}")
    return 0


def cmd_transfer(cfg, args) -> int:
    from .plotting import plot_matrix

    if not cfg.sources or not cfg.targets:
        raise ConfigError("transfer needs at least one source and one target")
    ds = _load_dataset(cfg)
    specs = cfg.attack_specs()
    sources = [_load(m, cfg, ds) for m in cfg.sources]
    loaded = {a.model_id: a for a in sources}
    targets = [loaded.get(m) or _load(m, cfg, ds) for m in cfg.targets]
    matrix = run_transfer(sources, targets, specs, ds, quantized=cfg.quantized, workers=cfg.workers)
    matrix.config.update(_echo(cfg))
    out = Path(cfg.out)
    _write_json(out / "matrix.json", matrix.to_json())
    text = matrix.to_text(cfg.metric)
    (out / "matrix.txt").write_text(text + "\n")
    plot_matrix(matrix, out / "matrix.png", cfg.metric)
    print(text)
    if specs and matrix.succeeded() == 0:
        print("no transfer cell succeeded", file=sys.stderr)
        return 5
    return 0


def cmd_sweep(cfg, args) -> int:
    from .plotting import plot_sweep

    kind = args.kind or cfg.sweep.get("kind")
    if kind is None:
        raise ConfigError("sweep kind missing (tau, lambda_mode or layer)")
    if len(cfg.sources) != 1:
        raise ConfigError("sweep needs exactly one source model")
    spec = _single_spec(cfg)
    attack = cfg.sweep.get("attack", spec.name)
    ds = _load_dataset(cfg)
    source = _load(cfg.sources[0], cfg, ds)
    targets = [_load(m, cfg, ds) for m in cfg.targets if m != source.model_id]
    table = sweep(kind, cfg.sweep.get("grid"), spec.config, source, targets, ds,
                  attack=attack, quantized=cfg.quantized, workers=cfg.workers)
    table.config.update(_echo(cfg))
    out = Path(cfg.out)
    _write_json(out / f"sweep_{kind}.json", table.to_json())
    text = table.to_text()
    (out / f"sweep_{kind}.txt").write_text(text + "\n")
    plot_sweep(table, out / f"sweep_{kind}.png")
    print(text)
    ok = sum(1 for r in table.rows for c in r["cells"].values() if c.get("error") is None)
    return 0 if ok else 5


def _parse_ref(ref):
    if isinstance(ref, str):
        try:
            r, c = (int(v) for v in ref.split(","))
        except ValueError as exc:
            raise ConfigError(f"--ref must look like ROW,COL, got {ref!r}") from exc
        return r, c
    if isinstance(ref, (list, tuple)) and len(ref) == 2:
        return int(ref[0]), int(ref[1])
    raise ConfigError(f"bad reference pixel {ref!r}")


def cmd_simmap(cfg, args) -> int:
    """Similarity maps of one image before and after the attack.

    ``ref`` is given in image pixels and mapped to the feature grid.
    """
    from .plotting import plot_simmap

    spec = _single_spec(cfg)
    ds = _load_dataset(cfg)
    model = _load(cfg.sources[0], cfg, ds)
    index = int(cfg.simmap.get("image", 0))
    if not 0 <= index < len(ds):
        raise ConfigError(f"image index {index} outside dataset of {len(ds)}")
    x, y = ds.load(index) if hasattr(ds, "load") else list(ds)[index]
    layer = cfg.simmap.get("layer") or spec.config.layer_id or recommended_layer(model.architecture)
    H, W = x.shape[:2]
    r, c = _parse_ref(cfg.simmap.get("ref", f"{H // 2},{W // 2}"))
    if not (0 <= r < H and 0 <= c < W):
        raise ConfigError(f"reference pixel {(r, c)} outside the {H}x{W} image")
    from .attacker import get_attack

    seed = derive_seed(spec.config.seed, model.model_id, spec.title, index)
    trace = get_attack(spec.name)(model, x, y, replace(spec.config, seed=seed),
                                  getattr(ds, "ignore_index", 255))
    with torch.no_grad():
        f_clean = model.features(x, layer)
        f_adv = model.features(trace.x_adv, layer)
    ref = (r * f_clean.height // H, c * f_clean.width // W)
    m_clean, m_adv = similarity_map(f_clean, ref), similarity_map(f_adv, ref)
    out = Path(cfg.out)
    plot_simmap(x.numpy(), trace.x_adv.numpy(), m_clean.numpy(), m_adv.numpy(), ref, out / "simmap.png")
    record = {"image": index, "layer": layer, "ref_pixel": [r, c], "ref_feature": list(ref),
              "clean_map": m_clean.tolist(), "adv_map": m_adv.tolist(), "attack": spec.to_json(),
              **_echo(cfg)}
    insts = getattr(ds, "instances", None)
    if insts:
        inst_map = load_instance_map(ds, index)
        rid = int(inst_map[r, c])
        if rid:
            from .evalx import downsample_labels

            small = downsample_labels(inst_map, (f_clean.height, f_clean.width))
            record["instance_mean"] = {
                str(i["id"]): {"clean": float(m_clean.numpy()[small == i["id"]].mean()),
                               "adv": float(m_adv.numpy()[small == i["id"]].mean())}
                for i in insts[index] if (small == i["id"]).any()
            }
    _write_json(out / "simmap.json", record)
    print(f"similarity maps for image {index} at {layer}, ref {ref} -> {out / 'simmap.png'}")
    return 0


def cmd_synth(cfg, args) -> int:
    out = Path(cfg.out)
    if args.preset:
        if args.preset != "desk":
            raise ConfigError(f"unknown preset {args.preset!r}")
        specs = desk_preset(cfg.seed)
        for split, spec in specs.items():
            m = generate_synthetic(spec, out / split)
            print(f"{split}: {len(m)} images -> {m.root}")
        return 0
    spec = SynthSpec.from_dict({"seed": cfg.seed, **cfg.synth})
    m = generate_synthetic(spec, out)
    print(f"{len(m)} images -> {m.root}")
    return 0


def cmd_train(cfg, args) -> int:
    models = list(TOY_MODELS) if args.all_toys else cfg.train.get("models", cfg.sources)
    if not models:
        raise ConfigError("no models to train")
    for m in models:
        if not is_toy(m):
            raise ConfigError(f"only bundled toy models can be trained, not {m!r}")
    if not cfg.dataset:
        raise ConfigError("no dataset given (set `dataset` or pass --data)")
    root = Path(cfg.dataset)
    train_root = Path(cfg.train.get("train_root") or (root / "train" if (root / "train").is_dir() else root))
    eval_root = root / "eval" if (root / "eval").is_dir() else None
    train_ds = load_manifest(train_root)
    if len(train_ds) == 0:
        raise ConfigError(f"no training images under {train_root}")
    eval_ds = load_manifest(eval_root) if eval_root else None
    opts = {**TRAIN_DEFAULTS, **cfg.train}
    epochs = int(opts["epochs"])
    out = Path(cfg.out)
    report = {}
    for m in models:
        path = train_toy(m, train_ds, epochs, derive_seed(cfg.seed, "train", m), out / f"{m}.pt",
                         eval_manifest=eval_ds, batch_size=int(opts["batch_size"]),
                         lr=float(opts["lr"]))
        side = json.loads(path.with_suffix(".json").read_text())
        report[m] = {"weights": str(path), **side}
        print(f"{m}: clean mIoU {100 * side['clean_miou']:.2f} -> {path}")
    _write_json(out / "train_report.json", {"models": report, **_echo(cfg)})
    return 0


def cmd_list_models(cfg, args) -> int:
    rec = {}
    for e in LAYER_REGISTRY:
        if e.recommended:
            rec.setdefault(e.architecture, e.layer_id)
    for m in list_models():
        flag = "weights required" if m["needs_weights"] else "toy"
        print(f"{m['model_id']:<12} {flag:<17} {m['description']}")
    print("\nrecommended feature layers:")
    for arch, layer in rec.items():
        print(f"  {arch:<12} {layer}")
    return 0


COMMANDS = {
    "attack": cmd_attack,
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
    "simmap": cmd_simmap,
    "synth": cmd_synth,
    "train": cmd_train,
    "list-models": cmd_list_models,
}


# --- argument parsing ---------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="TOML run config (or a JSON config echo)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", dest="dataset", help="dataset root")
    p.add_argument("--max-images", type=int)
    p.add_argument("--source", action="append", dest="sources", help="source model id (repeatable)")
    p.add_argument("--target", action="append", dest="targets", help="target model id (repeatable)")
    p.add_argument("--weights", action="append", default=[], metavar="MODEL=PATH")
    p.add_argument("--attack", action="append", dest="attack_names",
                   help="attack table from the config, or a bare attack name (repeatable)")
    p.add_argument("--metric", choices=["miou", "miou_quantized"])
    p.add_argument("--no-quantize", dest="quantized", action="store_false", default=None)
    g = p.add_argument_group("attack overrides (applied to every attack)")
    g.add_argument("--epsilon", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--iterations", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--layer", dest="layer_id")
    g.add_argument("--loss-mode")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segattack", description="Feature-similarity transfer attacks on segmentation models")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "sweep":
            p.add_argument("kind", nargs="?", choices=["tau", "lambda_mode", "layer"])
        if name == "simmap":
            p.add_argument("--ref", help="reference pixel ROW,COL in image coordinates")
            p.add_argument("--image", type=int, help="image index in the dataset")
        if name == "synth":
            p.add_argument("--preset", help="named generator preset (desk)")
        if name == "train":
            p.add_argument("--all-toys", action="store_true")
            p.add_argument("--epochs", type=int)
    return parser


def _overrides(args) -> dict:
    ov = {k: getattr(args, k, None) for k in
          ("seed", "workers", "out", "dataset", "max_images", "sources", "targets", "metric",
           "quantized", "epsilon", "alpha", "iterations", "tau", "layer_id", "loss_mode")}
    return ov


def _resolve(args):
    file_values = read_config_file(args.config) if args.config else {}
    ov = _overrides(args)
    if args.weights:
        w = dict(file_values.get("weights", {}))
        for item in args.weights:
            if "=" not in item:
                raise ConfigError(f"--weights expects MODEL=PATH, got {item!r}")
            k, v = item.split("=", 1)
            w[k] = str(Path(v).resolve())
        ov["weights"] = w
    if args.attack_names:
        tables = file_values.get("attacks", {})
        ov["attacks"] = {n: dict(tables.get(n, {})) for n in args.attack_names}
    if args.command == "simmap":
        sm = dict(file_values.get("simmap", {}))
        if args.ref:
            sm["ref"] = args.ref
        if args.image is not None:
            sm["image"] = args.image
        ov["simmap"] = sm
    if args.command == "train" and args.epochs is not None:
        ov["train"] = {**file_values.get("train", {}), "epochs": args.epochs}
    return build_config(file_values, ov)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not args.verbose:
        warnings.simplefilter("default")
    try:
        cfg, defaulted = _resolve(args)
        if args.command != "list-models":
            lines = describe_defaults(cfg, defaulted, RELEVANT[args.command])
            if args.command == "synth" and not args.preset:
                lines += [f"synth.{k} = {v!r}" for k, v in asdict(SynthSpec()).items()
                          if k not in cfg.synth and k != "seed"]
            if args.command == "train":
                lines += [f"train.{k} = {v!r}" for k, v in TRAIN_DEFAULTS.items() if k not in cfg.train]
            for line in lines:
                print(f"default: {line}", file=sys.stderr)
            if args.command not in ("synth",):
                _write_json(Path(cfg.out) / "config.json", cfg.resolved())
        torch.manual_seed(cfg.seed)
        return COMMANDS[args.command](cfg, args)
    except SegAttackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
