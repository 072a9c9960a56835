"""Segmentation metrics and the transfer / ablation protocol."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .attacker import AttackConfig, get_attack
from .errors import ConfigError, ShapeError, UndefinedMetricError
from .simcore import FeatureMap, normalize_pixels

log = logging.getLogger(__name__)

MIOU_PROTOCOL = "global"  # confusion accumulated over the whole set, reduced once


# --- metrics ------------------------------------------------------------------


def confusion(pred, gt, num_classes: int, ignore_index: int = 255) -> np.ndarray:
    """``conf[g, p]`` counts pixels with ground truth ``g`` predicted as ``p``."""
    pred = np.asarray(pred).astype(np.int64).ravel() if not torch.is_tensor(pred) else pred.reshape(-1).cpu().numpy()
    gt = np.asarray(gt).astype(np.int64).ravel() if not torch.is_tensor(gt) else gt.reshape(-1).cpu().numpy()
    if pred.shape != gt.shape:
        raise ShapeError(f"pred and gt sizes differ: {pred.shape} vs {gt.shape}")
    keep = gt != ignore_index
    g, p = gt[keep], pred[keep]
    if g.size and (g.max() >= num_classes or g.min() < 0):
        raise ValueError("ground truth label outside [0, num_classes)")
    p = np.clip(p, 0, num_classes - 1)
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclass
class EvalReport:
    per_class_iou: list  # float, or None where the class has zero union
    miou: float
    pixel_count: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "pixel_count": self.pixel_count,
            "miou_protocol": MIOU_PROTOCOL,
            "config": self.config,
        }


def miou(conf) -> EvalReport:
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ShapeError("confusion matrix must be square")
    if (conf < 0).any():
        raise ValueError("confusion counts must be nonnegative")
    tp = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - tp
    present = union > 0
    if not present.any():
        raise UndefinedMetricError("mIoU undefined: every class has zero union")
    iou = np.where(present, tp / np.where(present, union, 1), np.nan)
    per_class = [float(v) if ok else None for v, ok in zip(iou, present)]
    return EvalReport(per_class, float(iou[present].mean()), int(conf.sum()))


def _dataset_meta(dataset, default_classes):
    return getattr(dataset, "num_classes", default_classes), getattr(dataset, "ignore_index", 255)


def _items(dataset) -> Iterable:
    if hasattr(dataset, "load"):
        return (dataset.load(i) for i in range(len(dataset)))
    return iter(dataset)


def evaluate(adapter, dataset, images: Sequence[torch.Tensor] | None = None) -> EvalReport:
    """Global mIoU of ``adapter`` over ``dataset`` (optionally on replacement images)."""
    n_cls, ignore = _dataset_meta(dataset, adapter.num_classes)
    conf = np.zeros((n_cls, n_cls), dtype=np.int64)
    for i, (x, y) in enumerate(_items(dataset)):
        xi = images[i] if images is not None else x
        conf += confusion(adapter.predict(xi), y, n_cls, ignore)
    report = miou(conf)
    report.config = {"model": adapter.model_id}
    return report


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Round-trip through 8-bit pixel values."""
    return torch.round(x.clamp(0, 1) * 255) / 255


# --- seeds and hashing ----------------------------------------------------------


def derive_seed(root_seed: int, *keys) -> int:
    """Deterministic per-task seed, independent of scheduling order."""
    digest = hashlib.sha256(json.dumps([int(root_seed), *map(str, keys)]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


# --- attack specs and the transfer matrix --------------------------------------------


@dataclass
class AttackSpec:
    name: str
    config: AttackConfig = field(default_factory=AttackConfig)
    label: str | None = None

    @property
    def title(self) -> str:
        return self.label or self.name

    def to_json(self) -> dict:
        return {"name": self.name, "label": self.title, "config": self.config.to_dict()}


def attack_dataset(adapter, spec: AttackSpec, dataset, on_trace=None) -> list[torch.Tensor]:
    """Attack every image once; return the adversarial images.

    Image ``i`` uses a seed derived from ``(spec.config.seed, model, attack, i)``.
    ``on_trace(i, trace, seed)`` is called after each image.
    """
    fn = get_attack(spec.name)
    _, ignore = _dataset_meta(dataset, adapter.num_classes)
    advs = []
    for i, (x, y) in enumerate(_items(dataset)):
        seed = derive_seed(spec.config.seed, adapter.model_id, spec.title, i)
        cfg = replace(spec.config, seed=seed)
        trace = fn(adapter, x, y, cfg, ignore)
        advs.append(trace.x_adv.detach())
        if on_trace is not None:
            on_trace(i, trace, seed)
    return advs


@dataclass
class TransferMatrix:
    models: list[str]
    clean: dict[str, float]
    rows: list[dict]
    config: dict = field(default_factory=dict)

    def cell(self, source: str, attack: str, model: str) -> dict:
        for row in self.rows:
            if row["source"] == source and row["attack"] == attack:
                return row["cells"][model]
        raise KeyError((source, attack, model))

    def to_json(self) -> dict:
        return {
            "models": self.models,
            "clean": self.clean,
            "rows": self.rows,
            "config": self.config,
            "miou_protocol": MIOU_PROTOCOL,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TransferMatrix":
        return cls(d["models"], d["clean"], d["rows"], d.get("config", {}))

    def to_text(self, key: str = "miou") -> str:
        return render_table(self, key)

    def succeeded(self) -> int:
        return sum(1 for r in self.rows for c in r["cells"].values() if c.get("error") is None)


def _fmt(v, width=10):
    if v is None:
        return "-".rjust(width)
    if isinstance(v, str):
        return v.rjust(width)
    return f"{100 * v:.2f}".rjust(width)


def render_table(matrix: TransferMatrix, key: str = "miou") -> str:
    """Plain-text table, clean row first; ``*`` marks the per-source column minimum.

    The source column shows each row's own source model; target columns that
    coincide with the row's source are left blank.
    """
    cols = matrix.models
    lines = ["  ".join(h.rjust(13) for h in ["source", "attack", "source_model", *cols])]
    sources = list(dict.fromkeys(r["source"] for r in matrix.rows))
    src_clean = "/".join(f"{100 * matrix.clean[s]:.2f}" for s in sources) or "-"
    lines.append("  ".join(["clean".rjust(13), "clean".rjust(13), src_clean.rjust(13)]
                           + [_fmt(matrix.clean.get(m), 13) for m in cols]))

    def value(row, col):
        if col == row["source"]:
            return None
        c = row["cells"].get(row["source"] if col is None else col)
        if c is None:
            return None
        return "ERR" if c.get("error") else c.get(key)

    for source in sources:
        rows = [r for r in matrix.rows if r["source"] == source]
        for r in rows:
            out = [source.rjust(13), r["attack"].rjust(13)]
            for col in [None, *cols]:
                v = value(r, col)
                nums = [value(o, col) for o in rows]
                nums = [n for n in nums if isinstance(n, float)]
                mark = "*" if isinstance(v, float) and len(nums) > 1 and v == min(nums) else " "
                out.append(_fmt(v, 12) + mark)
            lines.append("  ".join(out))
    return "\n".join(lines)


def _run_cell(source, spec: AttackSpec, models: dict, dataset, quantized: bool):
    cell_models = [source.model_id] + [m for m in models if m != source.model_id]
    n_cls, ignore = _dataset_meta(dataset, source.num_classes)
    common = {"seed": spec.config.seed, "config_hash": config_hash(spec.to_json())}
    try:
        advs = attack_dataset(source, spec, dataset)
    except Exception as exc:  # recorded in-cell; the run continues
        log.exception("attack %s on %s failed", spec.title, source.model_id)
        return {m: {**common, "error": f"{type(exc).__name__}: {exc}"} for m in cell_models}
    advs_q = [quantize(a) for a in advs] if quantized else None
    cells = {}
    for mid in cell_models:
        adapter = source if mid == source.model_id else models[mid]
        try:
            rep = evaluate(adapter, dataset, advs)
            cell = {**common, "miou": rep.miou, "per_class_iou": rep.per_class_iou, "error": None}
            if quantized:
                cell["miou_quantized"] = evaluate(adapter, dataset, advs_q).miou
        except Exception as exc:
            cell = {**common, "error": f"{type(exc).__name__}: {exc}"}
        cells[mid] = cell
    return cells


def run_transfer(sources, targets, attacks: Sequence[AttackSpec], dataset, *, quantized: bool = True,
                 workers: int = 1, clean: dict | None = None) -> TransferMatrix:
    """Craft adversarial images on each source and score them on every model.

    Each (source, attack) pair generates its images once; they are evaluated
    on the source and all targets. A clean row covers every model.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    for spec in attacks:
        get_attack(spec.name)
        spec.config.validate()
    all_models = {}
    for a in list(sources) + list(targets):
        all_models.setdefault(a.model_id, a)
    order = [a.model_id for a in targets]
    for a in sources:
        if a.model_id not in order:
            order.append(a.model_id)
    clean = dict(clean or {})
    for mid, adapter in all_models.items():
        if mid not in clean:
            clean[mid] = evaluate(adapter, dataset).miou

    jobs = [(s, spec) for s in sources for spec in attacks]
    if workers > 1 and len(jobs) > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(
            delayed(_run_cell)(s, spec, all_models, dataset, quantized) for s, spec in jobs
        )
    else:
        results = [_run_cell(s, spec, all_models, dataset, quantized) for s, spec in jobs]
    rows = [
        {"source": s.model_id, "attack": spec.title, "spec": spec.to_json(), "cells": cells}
        for (s, spec), cells in zip(jobs, results)
    ]
    config = {
        "sources": [s.metadata() for s in sources],
        "targets": [t.metadata() for t in targets],
        "attacks": [a.to_json() for a in attacks],
        "dataset_size": len(dataset),
        "quantized": quantized,
    }
    return TransferMatrix(order, clean, rows, config)


# --- ablation sweeps ---------------------------------------------------------------

LAMBDA_MODES = {
    "ex_only": ("L_ex", {"loss_mode": "ex_only"}),
    "in_only": ("L_in", {"loss_mode": "in_only"}),
    "const_1.0": ("L_ex + L_in", {"loss_mode": "ex_plus_scaled_in", "in_weight": 1.0}),
    "const_0.5": ("L_ex + 0.5L_in", {"loss_mode": "ex_plus_scaled_in", "in_weight": 0.5}),
    "const_0.1": ("L_ex + 0.1L_in", {"loss_mode": "ex_plus_scaled_in", "in_weight": 0.1}),
    "dynamic": ("dynamic", {"loss_mode": "fspgd_dynamic"}),
}

TAU_GRID = {"pi/6": math.cos(math.pi / 6), "pi/4": math.cos(math.pi / 4), "pi/3": math.cos(math.pi / 3)}


def _sweep_point(kind: str, value, base: AttackConfig):
    if kind == "tau":
        if isinstance(value, str):
            if value not in TAU_GRID:
                raise ConfigError(f"unknown tau label {value!r}")
            return value, replace(base, tau=TAU_GRID[value])
        return f"{value:.4f}", replace(base, tau=float(value))
    if kind == "lambda_mode":
        if value not in LAMBDA_MODES:
            raise ConfigError(f"unknown lambda mode {value!r}; choose from {sorted(LAMBDA_MODES)}")
        label, changes = LAMBDA_MODES[value]
        return label, replace(base, **changes)
    if kind == "layer":
        return str(value), replace(base, layer_id=str(value))
    raise ConfigError(f"unknown sweep kind {kind!r}")


@dataclass
class SweepTable:
    kind: str
    source: str
    models: list[str]
    clean: dict[str, float]
    rows: list[dict]  # {"value", "label", "cells": {model: cell}}
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "source": self.source,
            "models": self.models,
            "clean": self.clean,
            "rows": self.rows,
            "config": self.config,
            "miou_protocol": MIOU_PROTOCOL,
        }

    def value(self, label: str, model: str):
        for r in self.rows:
            if r["label"] == label:
                return r["cells"][model].get("miou")
        raise KeyError(label)

    def to_text(self) -> str:
        cols = [self.source] + [m for m in self.models if m != self.source]
        head = ["source", self.kind] + ["source_model" if c == self.source else c for c in cols]
        lines = ["  ".join(h.rjust(14) for h in head)]
        best = {}
        for c in cols:
            vals = [r["cells"][c].get("miou") for r in self.rows]
            nums = [v for v in vals if v is not None]
            best[c] = min(nums) if nums else None
        for r in self.rows:
            out = [self.source.rjust(14), r["label"].rjust(14)]
            for c in cols:
                v = r["cells"][c].get("miou")
                s = _fmt(v, 13) + ("*" if v is not None and v == best[c] else " ")
                out.append(s)
            lines.append("  ".join(out))
        return "\n".join(lines)


def default_grid(kind: str, source=None) -> list:
    if kind == "tau":
        return ["pi/6", "pi/4", "pi/3"]
    if kind == "lambda_mode":
        return list(LAMBDA_MODES)
    if kind == "layer":
        if source is None:
            raise ConfigError("layer sweep needs a source adapter")
        return source.available_layers
    raise ConfigError(f"unknown sweep kind {kind!r}")


def sweep(kind: str, grid, base: AttackConfig, source, targets, dataset, *, attack: str = "fspgd",
          quantized: bool = False, workers: int = 1) -> SweepTable:
    """One transfer slice per grid point, keyed by the swept value."""
    grid = list(grid) if grid is not None else default_grid(kind, source)
    if not grid:
        raise ConfigError("sweep grid is empty")
    specs = []
    for value in grid:
        label, cfg = _sweep_point(kind, value, base)
        specs.append(AttackSpec(attack, cfg.validate(), label))
    matrix = run_transfer([source], targets, specs, dataset, quantized=quantized, workers=workers)
    rows = [
        {"value": value if not isinstance(value, float) else float(value), "label": r["attack"],
         "config": r["spec"]["config"], "cells": r["cells"]}
        for value, r in zip(grid, matrix.rows)
    ]
    return SweepTable(kind, source.model_id, matrix.models, matrix.clean, rows, matrix.config)


# --- feature similarity maps ---------------------------------------------------------


def similarity_map(f: FeatureMap, ref_pixel: tuple[int, int]) -> torch.Tensor:
    """Cosine of every feature pixel against ``ref_pixel``, shape ``(h, w)``."""
    r, c = ref_pixel
    if not (0 <= r < f.height and 0 <= c < f.width):
        raise IndexError(f"reference pixel {ref_pixel} outside {f.height}x{f.width}")
    n = normalize_pixels(f.values.detach())
    ref = n[:, r * f.width + c]
    return (ref @ n).reshape(f.height, f.width)


def upsample_nearest(m: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(m[None, None].float(), size=size, mode="nearest")[0, 0]


def downsample_labels(labels, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour label map at feature resolution."""
    t = torch.as_tensor(np.asarray(labels), dtype=torch.float32)[None, None]
    return F.interpolate(t, size=size, mode="nearest")[0, 0].long().numpy()


def instance_pairs(instances: list[dict]) -> list[tuple[int, int]]:
    """(reference, other) instance ids sharing a class; first two of each class."""
    by_class: dict[int, list[int]] = {}
    for inst in instances:
        by_class.setdefault(inst["class"], []).append(inst["id"])
    return [(ids[0], ids[1]) for _, ids in sorted(by_class.items()) if len(ids) >= 2]


def instance_similarity(f: FeatureMap, inst_map, ref_id: int, other_id: int) -> float | None:
    """Mean similarity-map value over instance ``other_id`` with the reference
    pixel at the feature cell nearest the centroid of instance ``ref_id``.
    Returns None if either instance vanishes at feature resolution."""
    small = downsample_labels(inst_map, (f.height, f.width))
    ref_cells = np.argwhere(small == ref_id)
    other = small == other_id
    if len(ref_cells) == 0 or not other.any():
        return None
    centroid = ref_cells.mean(0)
    ref = ref_cells[np.argmin(((ref_cells - centroid) ** 2).sum(1))]
    m = similarity_map(f, (int(ref[0]), int(ref[1])))
    return float(m.numpy()[other].mean())
