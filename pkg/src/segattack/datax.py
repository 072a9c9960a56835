"""Datasets: manifests over image/mask directories, synthetic shapes, toy training."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, FormatError, GenerationError, ManifestError, TrainingError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

SHAPE_KINDS = ("disc", "square", "triangle", "bar")


def voc_palette(n: int = 256) -> dict[int, tuple[int, int, int]]:
    """The standard VOC bit-interleaved colormap."""
    out = {}
    for i in range(n):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        out[i] = (r, g, b)
    return out


VOC_CLASSES = (
    "background", "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person", "pottedplant",
    "sheep", "sofa", "train", "tvmonitor",
)


@dataclass
class DatasetManifest:
    root: Path
    pairs: list[tuple[Path, Path]]
    num_classes: int
    ignore_index: int = 255
    palette: dict[int, tuple[int, int, int]] = field(default_factory=dict)
    instances: list[list[dict]] | None = None

    def __len__(self):
        return len(self.pairs)

    @property
    def stems(self) -> list[str]:
        return [p[0].stem for p in self.pairs]

    def load_image(self, i: int) -> torch.Tensor:
        with Image.open(self.pairs[i][0]) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(arr.copy())

    def load_mask(self, i: int) -> torch.Tensor:
        return torch.from_numpy(_read_mask(self.pairs[i][1], self.palette, self.ignore_index))

    def load(self, i: int):
        """Return ``(image (H, W, 3) float in [0, 1], labels (H, W) int64)``."""
        return self.load_image(i), self.load_mask(i)

    def __iter__(self):
        for i in range(len(self)):
            yield self.load(i)

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "ignore_index": self.ignore_index,
            "palette": {str(k): list(v) for k, v in self.palette.items()},
            "pairs": [
                {"image": str(a.relative_to(self.root)), "mask": str(b.relative_to(self.root))}
                for a, b in self.pairs
            ],
            "instances": self.instances,
        }

    def write(self):
        with open(self.root / "manifest.json", "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    def subset(self, n: int) -> "DatasetManifest":
        inst = self.instances[:n] if self.instances is not None else None
        return DatasetManifest(
            self.root, self.pairs[:n], self.num_classes, self.ignore_index, self.palette, inst
        )


def _read_mask(path, palette, ignore_index) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("L", "P", "I", "I;16"):
            return np.asarray(im, dtype=np.int64).copy()
        if im.mode not in ("RGB", "RGBA"):
            raise FormatError(f"unsupported mask mode {im.mode} in {path}")
        rgb = np.asarray(im.convert("RGB"), dtype=np.int64)
    if not palette:
        raise FormatError(f"{path} is an RGB mask but no palette was declared")
    key = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    out = np.full(key.shape, -1, dtype=np.int64)
    for cls, (r, g, b) in palette.items():
        out[key == ((r << 16) | (g << 8) | b)] = cls
    if (out < 0).any():
        raise FormatError(f"{path} contains colors outside the declared palette")
    return out


def _stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_manifest(root, num_classes: int | None = None, ignore_index: int = 255,
                  palette: dict | None = None, validate: bool = True) -> DatasetManifest:
    """Scan ``root/images`` and ``root/masks`` into a sorted manifest.

    Metadata in ``root/manifest.json`` (if present) fills any argument left
    unset. Masks are single-channel class-id images; RGB masks are decoded
    through the palette.
    """
    root = Path(root).resolve()
    meta = {}
    if (root / "manifest.json").is_file():
        with open(root / "manifest.json") as fh:
            meta = json.load(fh)
    if palette is None:
        palette = {int(k): tuple(v) for k, v in meta.get("palette", {}).items()}
    if num_classes is None:
        num_classes = meta.get("num_classes")
    ignore_index = meta.get("ignore_index", ignore_index)

    images, masks = _stems(root / "images"), _stems(root / "masks")
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise ManifestError(f"unmatched stems under {root}: {unmatched}")
    stems = sorted(images)
    if not stems:
        warnings.warn(f"no image/mask pairs found under {root}")
    pairs = [(images[s], masks[s]) for s in stems]

    max_label = -1
    if validate:
        for img, msk in pairs:
            with Image.open(img) as a, Image.open(msk) as b:
                if a.size != b.size:
                    raise ManifestError(f"size mismatch for {img.stem}: {a.size} vs {b.size}")
            m = _read_mask(msk, palette, ignore_index)
            valid = m[m != ignore_index]
            if valid.size:
                max_label = max(max_label, int(valid.max()))
            if palette and valid.size and not np.isin(valid, list(palette)).all():
                raise FormatError(f"{msk} has class ids outside the declared palette")
    if num_classes is None:
        num_classes = max_label + 1 if max_label >= 0 else 0
    elif max_label >= num_classes:
        raise FormatError(f"mask label {max_label} exceeds num_classes={num_classes}")

    instances = meta.get("instances")
    if instances is not None and len(instances) != len(pairs):
        instances = None
    return DatasetManifest(root, pairs, int(num_classes), ignore_index, palette, instances)


def load_voc(root, split: str = "val") -> DatasetManifest:
    """Pascal VOC 2012 layout: JPEGImages/, SegmentationClass/, ImageSets/Segmentation/."""
    root = Path(root).resolve()
    ids_file = root / "ImageSets" / "Segmentation" / f"{split}.txt"
    if not ids_file.is_file():
        raise ManifestError(f"missing split file {ids_file}")
    ids = sorted(ids_file.read_text().split())
    pairs = [(root / "JPEGImages" / f"{i}.jpg", root / "SegmentationClass" / f"{i}.png") for i in ids]
    missing = [str(p) for pair in pairs for p in pair if not p.is_file()]
    if missing:
        raise ManifestError(f"{len(missing)} VOC files missing, e.g. {missing[:3]}")
    pal = {k: v for k, v in voc_palette().items() if k < len(VOC_CLASSES)}
    return DatasetManifest(root, pairs, len(VOC_CLASSES), 255, pal)


def load_cityscapes(root, split: str = "val") -> DatasetManifest:
    """Cityscapes with pre-generated ``*_gtFine_labelTrainIds.png`` (19 classes)."""
    root = Path(root).resolve()
    pairs = []
    for img in sorted((root / "leftImg8bit" / split).glob("*/*_leftImg8bit.png")):
        city = img.parent.name
        stem = img.name[: -len("_leftImg8bit.png")]
        msk = root / "gtFine" / split / city / f"{stem}_gtFine_labelTrainIds.png"
        if not msk.is_file():
            raise ManifestError(f"missing trainId mask for {stem}")
        pairs.append((img, msk))
    return DatasetManifest(root, pairs, 19, 255, {})


# --- synthetic shapes -------------------------------------------------------

CLASS_COLORS = {
    1: (0.85, 0.25, 0.20),
    2: (0.20, 0.70, 0.30),
    3: (0.25, 0.35, 0.85),
    4: (0.90, 0.80, 0.20),
}


def _class_direction(cls_id: int) -> np.ndarray:
    colors = np.array(list(CLASS_COLORS.values()))
    d = np.array(CLASS_COLORS.get(cls_id, (0.5, 0.5, 0.5))) - colors.mean(0)
    return d / max(np.linalg.norm(d), 1e-12)


@dataclass
class SynthSpec:
    num_images: int = 50
    height: int = 64
    width: int = 64
    classes: dict[str, int] = field(
        default_factory=lambda: {"disc": 1, "square": 2, "triangle": 3, "bar": 4}
    )
    instances_per_class: tuple[int, int] = (2, 3)
    classes_per_image: int = 2
    size_range: tuple[int, int] = (5, 8)
    color_jitter: float = 0.08
    noise_std: float = 0.03
    # None paints absolute class colors; a float paints each shape as the
    # background plus a class-specific color offset of this L2 length
    contrast: float | None = None
    # "class": offset direction fixed per class; "random": per instance, so
    # only the shape identifies the class
    offset_mode: str = "class"
    seed: int = 0
    max_retries: int = 200

    def validate(self):
        if self.num_images < 0:
            raise ConfigError("num_images must be >= 0")
        lo, hi = self.instances_per_class
        if lo < 2 or hi < lo:
            raise ConfigError("instances_per_class must satisfy 2 <= min <= max")
        if not 1 <= self.classes_per_image <= len(self.classes):
            raise ConfigError("classes_per_image out of range")
        unknown = set(self.classes) - set(SHAPE_KINDS)
        if unknown:
            raise ConfigError(f"unknown shape kinds {sorted(unknown)}")
        if 0 in self.classes.values():
            raise ConfigError("class 0 is reserved for background")

    @property
    def num_classes(self) -> int:
        return max(self.classes.values()) + 1

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown synth keys: {sorted(extra)}")
        d = dict(d)
        for key in ("instances_per_class", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


DESK_EPOCHS = 60
DESK_CONTRAST = 0.1


def desk_preset(seed: int = 0) -> dict[str, SynthSpec]:
    """The acceptance substrate: 200 train / 50 eval images at 64x64.

    Objects are low-contrast offsets from the local background so that an
    8/255 budget is enough to flip predictions; see DESK_EPOCHS for training.
    """
    return {
        "train": SynthSpec(num_images=200, contrast=DESK_CONTRAST, seed=seed),
        "eval": SynthSpec(num_images=50, contrast=DESK_CONTRAST, seed=seed + 1),
    }


def _shape_mask(kind, cy, cx, r, h, w, vertical=False):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        s = int(round(r * 0.85))
        return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    if kind == "triangle":
        top = cy - r
        rows = yy - top
        return (rows >= 0) & (yy <= cy + r) & (np.abs(xx - cx) * 2 <= rows)
    if kind == "bar":
        long, thin = r, max(1, r // 3)
        if vertical:
            long, thin = thin, long
        return (np.abs(yy - cy) <= thin) & (np.abs(xx - cx) <= long)
    raise ConfigError(f"unknown shape kind {kind}")


def _render(spec: SynthSpec, index: int):
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.height, spec.width
    kinds = list(spec.classes)
    chosen = rng.choice(len(kinds), size=spec.classes_per_image, replace=False)

    # low-saturation background gradient
    base = rng.uniform(0.3, 0.6)
    c0 = base + rng.uniform(-0.08, 0.08, size=3)
    c1 = base + rng.uniform(-0.08, 0.08, size=3)
    ramp = np.linspace(0, 1, w)[None, :, None]
    img = c0 * (1 - ramp) + c1 * ramp
    img = np.broadcast_to(img, (h, w, 3)).copy()

    labels = np.zeros((h, w), dtype=np.uint8)
    inst_map = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    instances = []
    margin = 2
    for ci in sorted(chosen):
        kind = kinds[ci]
        cls_id = spec.classes[kind]
        count = int(rng.integers(spec.instances_per_class[0], spec.instances_per_class[1] + 1))
        color = np.array(CLASS_COLORS.get(cls_id, rng.uniform(0.2, 0.9, size=3)))
        for _ in range(count):
            for _attempt in range(spec.max_retries):
                r = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
                cy = int(rng.integers(r + 1, h - r - 1))
                cx = int(rng.integers(r + 1, w - r - 1))
                m = _shape_mask(kind, cy, cx, r, h, w, vertical=bool(rng.integers(2)))
                grown = np.zeros_like(m)
                ys, xs = np.nonzero(m)
                grown[max(ys.min() - margin, 0): ys.max() + margin + 1,
                      max(xs.min() - margin, 0): xs.max() + margin + 1] = True
                if not (grown & occupied).any():
                    break
            else:
                raise GenerationError(f"could not place a {kind} in image {index}")
            occupied |= m
            jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
            if spec.contrast is None:
                img[m] = np.clip(color + jitter, 0, 1)
            else:
                if spec.offset_mode == "class":
                    d = _class_direction(cls_id)
                else:
                    d = rng.normal(size=3)
                    d /= np.linalg.norm(d)
                img[m] = np.clip(img[m] + spec.contrast * (d + jitter), 0, 1)
            labels[m] = cls_id
            inst_id = len(instances) + 1
            inst_map[m] = inst_id
            instances.append({"id": inst_id, "class": cls_id, "kind": kind, "center": [cy, cx], "size": r})

    img = img + rng.normal(0, spec.noise_std, size=img.shape)
    img8 = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return img8, labels, inst_map, instances


def generate_synthetic(spec: SynthSpec, out_root) -> DatasetManifest:
    """Write ``images/``, ``masks/``, ``instances/`` and ``manifest.json``.

    Output is a pure function of ``spec``: same spec, same bytes.
    """
    spec.validate()
    root = Path(out_root).resolve()
    for sub in ("images", "masks", "instances"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    pairs, all_instances = [], []
    for i in range(spec.num_images):
        img8, labels, inst_map, instances = _render(spec, i)
        stem = f"{i:05d}"
        ip, mp = root / "images" / f"{stem}.png", root / "masks" / f"{stem}.png"
        Image.fromarray(img8, "RGB").save(ip)
        Image.fromarray(labels, "L").save(mp)
        Image.fromarray(inst_map, "L").save(root / "instances" / f"{stem}.png")
        pairs.append((ip, mp))
        all_instances.append(instances)
    palette = {0: (0, 0, 0)}
    palette.update({c: tuple(int(round(v * 255)) for v in CLASS_COLORS.get(c, (0.5, 0.5, 0.5)))
                    for c in spec.classes.values()})
    manifest = DatasetManifest(root, pairs, spec.num_classes, 255, palette, all_instances)
    manifest.write()
    with open(root / "synth_spec.json", "w") as fh:
        json.dump(asdict(spec), fh, indent=1)
    return manifest


def load_instance_map(manifest: DatasetManifest, i: int) -> np.ndarray:
    path = manifest.root / "instances" / f"{manifest.stems[i]}.png"
    if not path.is_file():
        raise ManifestError(f"no instance map for {manifest.stems[i]}")
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64).copy()


# --- toy training -----------------------------------------------------------


def _stack(manifest: DatasetManifest):
    xs, ys = zip(*(manifest.load(i) for i in range(len(manifest))))
    return torch.stack(xs), torch.stack(ys)


def train_toy(model_id: str, manifest: DatasetManifest, epochs: int, seed: int, out_path,
              eval_manifest: DatasetManifest | None = None, batch_size: int = 16,
              lr: float = 3e-3) -> Path:
    """Train a bundled toy architecture and save a checkpoint.

    Deterministic on a single worker for a fixed seed. Returns the
    checkpoint path; the final clean mIoU is logged and written to a
    sidecar ``<checkpoint>.json`` so the checkpoint checksum stays stable.
    """
    from .adapters import build_module, load_model
    from .evalx import evaluate

    module = build_module(model_id, manifest.num_classes, seed=seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if epochs > 0 and len(manifest):
        gen = torch.Generator().manual_seed(seed)
        xs, ys = _stack(manifest)
        mean = torch.tensor([0.5, 0.5, 0.5]).view(1, 3, 1, 1)
        std = torch.tensor([0.25, 0.25, 0.25]).view(1, 3, 1, 1)
        xs = (xs.permute(0, 3, 1, 2) - mean) / std
        opt = torch.optim.Adam(module.parameters(), lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
        module.train()
        for epoch in range(epochs):
            perm = torch.randperm(len(xs), generator=gen)
            total = 0.0
            for start in range(0, len(xs), batch_size):
                idx = perm[start:start + batch_size]
                loss = F.cross_entropy(module(xs[idx]), ys[idx], ignore_index=manifest.ignore_index)
                if not torch.isfinite(loss):
                    raise TrainingError(f"{model_id}: non-finite loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            sched.step()
            log.debug("%s epoch %d loss %.4f", model_id, epoch, total / len(xs))
    module.eval()
    payload = {
        "model_id": model_id,
        "num_classes": manifest.num_classes,
        "seed": seed,
        "epochs": epochs,
        "state_dict": module.state_dict(),
    }
    torch.save(payload, out_path)
    target = eval_manifest if eval_manifest is not None else manifest
    if len(target):
        adapter = load_model(model_id, out_path)
        report = evaluate(adapter, target)
        log.info("%s clean mIoU %.4f", model_id, report.miou)
        with open(out_path.with_suffix(".json"), "w") as fh:
            json.dump({"model_id": model_id, "seed": seed, "epochs": epochs,
                       "clean_miou": report.miou}, fh, indent=1)
    return out_path
