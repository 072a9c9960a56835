"""Model adapters: logits, intermediate features and input gradients.

Every adapter takes images as ``(H, W, C)`` tensors in ``[0, 1]`` and returns
logits as ``(H, W, num_classes)``. Mean/std preprocessing happens inside the
adapter so attack budgets stay in raw pixel units.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AdapterError, LoadError, NumericError
from .simcore import FeatureMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerRegistryEntry:
    architecture: str
    layer_id: str
    recommended: bool
    note: str = ""


# Recommended layers for the full-scale encoders follow the ablation naming
# ("3_2" is block 2 of the conv3_x stage); toy entries are the stride-4 block.
LAYER_REGISTRY: list[LayerRegistryEntry] = [
    LayerRegistryEntry("resnet50", "conv3_x.2", True, "layer 2 of conv3_x (ablation name 3_2)"),
    LayerRegistryEntry("resnet101", "conv3_x.10", True, "ablation name 3_10"),
    LayerRegistryEntry("mit-b0", "block1.1", True, "layer 1 of transformer block 1"),
    LayerRegistryEntry("swin-s", "stage2.1", True, "layer 1 of stage 2"),
    LayerRegistryEntry("toy-cnn-a", "dec1", True, "stride-4 decoder block (desk layer sweep)"),
    LayerRegistryEntry("toy-cnn-a", "enc3", False, "stride-4 encoder block"),
    LayerRegistryEntry("toy-cnn-b", "dec1", True, "stride-8 decoder block"),
    LayerRegistryEntry("toy-cnn-b", "enc3", False, "stride-4 encoder block"),
]


def recommended_layer(architecture: str) -> str:
    for entry in LAYER_REGISTRY:
        if entry.architecture == architecture and entry.recommended:
            return entry.layer_id
    raise AdapterError(f"no recommended layer registered for {architecture!r}")


def _block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=False),
    )


class ToyCNNA(nn.Module):
    """Five convolutions: three encoder blocks down to stride 4, one decoder block, a 1x1 head."""

    def __init__(self, num_classes=5, width=16):
        super().__init__()
        w = width
        self.enc1 = _block(3, w)
        self.enc2 = _block(w, 2 * w, 2)
        self.enc3 = _block(2 * w, 2 * w, 2)
        self.dec1 = _block(2 * w, 2 * w)
        self.head = nn.Conv2d(2 * w, num_classes, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        z = self.dec1(self.enc3(self.enc2(self.enc1(x))))
        return F.interpolate(self.head(z), size=(h, w), mode="bilinear", align_corners=False)


class ToyCNNB(nn.Module):
    """Seven convolutions, narrower stem, one extra downsample (stride 8) before a skip-free head."""

    def __init__(self, num_classes=5, width=12):
        super().__init__()
        w = width
        self.enc1 = _block(3, w)
        self.enc2 = _block(w, 2 * w, 2)
        self.enc3 = _block(2 * w, 3 * w, 2)
        self.enc4 = _block(3 * w, 4 * w, 2)
        self.enc5 = _block(4 * w, 4 * w)
        self.dec1 = _block(4 * w, 3 * w)
        self.head = nn.Conv2d(3 * w, num_classes, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        z = self.enc3(self.enc2(self.enc1(x)))
        z = self.dec1(self.enc5(self.enc4(z)))
        return F.interpolate(self.head(z), size=(h, w), mode="bilinear", align_corners=False)


class ModelAdapter:
    """Wraps an ``nn.Module`` segmenter with named feature capture.

    ``layers`` maps layer ids to submodules; the captured activation is the
    submodule output (post-activation for the toy blocks).
    """

    def __init__(
        self,
        model_id: str,
        module: nn.Module,
        num_classes: int,
        layers: dict[str, nn.Module],
        input_size: tuple[int, int, int] | None = None,
        mean=(0.5, 0.5, 0.5),
        std=(0.25, 0.25, 0.25),
        architecture: str | None = None,
        checksum: str | None = None,
        weights_path: str | None = None,
        output_key: str | None = None,
    ):
        self.model_id = model_id
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.num_classes = num_classes
        self._layers = dict(layers)
        self.input_spec = {"size": input_size, "mean": list(mean), "std": list(std)}
        self.architecture = architecture or model_id
        self.checksum = checksum
        self.weights_path = weights_path
        self._output_key = output_key
        self._mean = torch.tensor(mean).view(1, -1, 1, 1)
        self._std = torch.tensor(std).view(1, -1, 1, 1)

    @property
    def available_layers(self) -> list[str]:
        return list(self._layers)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    def to(self, dtype: torch.dtype) -> "ModelAdapter":
        self.module.to(dtype)
        self._mean = self._mean.to(dtype)
        self._std = self._std.to(dtype)
        return self

    def metadata(self) -> dict:
        return {
            "model_id": self.model_id,
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "layers": self.available_layers,
            "checksum": self.checksum,
            "weights_path": self.weights_path,
            "preprocessing": self.input_spec,
        }

    def _prep(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3:
            raise AdapterError(f"expected an (H, W, C) image, got shape {tuple(x.shape)}")
        z = x.permute(2, 0, 1).unsqueeze(0).to(self.dtype)
        return (z - self._mean) / self._std

    def _run(self, z: torch.Tensor) -> torch.Tensor:
        out = self.module(z)
        if self._output_key is not None:
            out = out[self._output_key]
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = self._run(self._prep(x))
        return logits[0].permute(1, 2, 0)

    def forward_with_features(self, x: torch.Tensor, layer_id: str):
        """Single pass returning ``(logits, FeatureMap)`` for ``layer_id``."""
        if layer_id not in self._layers:
            raise AdapterError(
                f"unknown layer {layer_id!r} for {self.model_id}; available: {self.available_layers}"
            )
        captured = {}

        def hook(_module, _inp, out):
            captured["act"] = out

        handle = self._layers[layer_id].register_forward_hook(hook)
        try:
            logits = self.forward(x)
        finally:
            handle.remove()
        return logits, FeatureMap.from_activation(captured["act"])

    def features(self, x: torch.Tensor, layer_id: str) -> FeatureMap:
        return self.forward_with_features(x, layer_id)[1]

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(x).argmax(dim=-1)

    def input_gradient(
        self,
        x: torch.Tensor,
        loss_fn: Callable,
        layer_id: str | None = None,
        context: str = "",
    ):
        """Return ``(d loss / d x, loss value)``.

        ``loss_fn`` receives the logits, or ``(logits, FeatureMap)`` when a
        ``layer_id`` is given. Model parameters are never touched.
        """
        xv = x.detach().clone().requires_grad_(True)
        if layer_id is None:
            loss = loss_fn(self.forward(xv))
        else:
            loss = loss_fn(*self.forward_with_features(xv, layer_id))
        if not torch.is_tensor(loss):
            loss = torch.as_tensor(loss, dtype=xv.dtype)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss {loss.item()} {context}".strip())
        if not loss.requires_grad:
            return torch.zeros_like(xv), loss.detach()
        (grad,) = torch.autograd.grad(loss, xv, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(xv)
        return grad, loss.detach()


# --- registry -------------------------------------------------------------


@dataclass
class _ModelSpec:
    build: Callable[[], ModelAdapter]
    toy: bool
    needs_weights: bool
    description: str = ""
    extras: dict = field(default_factory=dict)


def _toy_adapter(model_id, cls, layer_names):
    def build(num_classes=5, seed=0):
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            module = cls(num_classes=num_classes)
        layers = {name: getattr(module, name) for name in layer_names}
        return ModelAdapter(model_id, module, num_classes, layers, architecture=model_id)

    return build


def _torchvision_adapter(model_id, ctor_name, num_classes, backbone_layers):
    def build(num_classes=num_classes):
        import torchvision.models.segmentation as seg

        module = getattr(seg, ctor_name)(
            weights=None, weights_backbone=None, num_classes=num_classes, aux_loss=False
        )
        backbone = module.backbone
        layers = {}
        for name, (stage, idx) in backbone_layers.items():
            layers[name] = getattr(backbone, stage)[idx]
        return ModelAdapter(
            model_id,
            module,
            num_classes,
            layers,
            mean=(0.485, 0.456, 0.406),
            std=(0.229, 0.224, 0.225),
            architecture=ctor_name,
            output_key="out",
        )

    return build


def _resnet_layers(depth):
    # conv2_x..conv5_x are torchvision layer1..layer4; ids are 1-based within the stage
    blocks = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}[depth]
    out = {}
    for stage, n in zip(range(2, 6), blocks):
        for i in range(n):
            out[f"conv{stage}_x.{i + 1}"] = (f"layer{stage - 1}", i)
    return out


_MODELS: dict[str, _ModelSpec] = {
    "toy-cnn-a": _ModelSpec(
        _toy_adapter("toy-cnn-a", ToyCNNA, ["enc1", "enc2", "enc3", "dec1"]),
        toy=True,
        needs_weights=False,
        description="5-conv encoder-decoder, stride 4",
    ),
    "toy-cnn-b": _ModelSpec(
        _toy_adapter("toy-cnn-b", ToyCNNB, ["enc1", "enc2", "enc3", "enc4", "enc5", "dec1"]),
        toy=True,
        needs_weights=False,
        description="7-conv encoder-decoder, stride 8",
    ),
    "dv3-res50": _ModelSpec(
        _torchvision_adapter("dv3-res50", "deeplabv3_resnet50", 21, _resnet_layers(50)),
        toy=False,
        needs_weights=True,
        description="torchvision DeepLabv3-ResNet50 (user weights)",
        extras={"architecture": "resnet50"},
    ),
    "dv3-res101": _ModelSpec(
        _torchvision_adapter("dv3-res101", "deeplabv3_resnet101", 21, _resnet_layers(101)),
        toy=False,
        needs_weights=True,
        description="torchvision DeepLabv3-ResNet101 (user weights)",
        extras={"architecture": "resnet101"},
    ),
    "fcn-res50": _ModelSpec(
        _torchvision_adapter("fcn-res50", "fcn_resnet50", 21, _resnet_layers(50)),
        toy=False,
        needs_weights=True,
        description="torchvision FCN-ResNet50 (user weights)",
        extras={"architecture": "resnet50"},
    ),
}


def register_model(model_id: str, build: Callable[..., ModelAdapter], *, needs_weights: bool = True,
                   description: str = "", architecture: str | None = None,
                   recommended_layer_id: str | None = None) -> None:
    """Add a model to the registry so ``load_model`` and the CLI can use it.

    ``build(num_classes=...)`` must return an unloaded ModelAdapter; weights
    are loaded by ``load_model``.
    """
    if model_id in _MODELS:
        raise AdapterError(f"model {model_id!r} is already registered")
    extras = {"architecture": architecture} if architecture else {}
    _MODELS[model_id] = _ModelSpec(build, toy=False, needs_weights=needs_weights,
                                   description=description, extras=extras)
    if recommended_layer_id is not None:
        LAYER_REGISTRY.append(LayerRegistryEntry(architecture or model_id, recommended_layer_id, True,
                                                 "user registered"))


def list_models() -> list[dict]:
    return [
        {"model_id": k, "toy": s.toy, "needs_weights": s.needs_weights, "description": s.description}
        for k, s in _MODELS.items()
    ]


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_model(model_id: str, weights_path=None, num_classes: int | None = None) -> ModelAdapter:
    """Build a registered adapter, optionally loading a checkpoint.

    Toy checkpoints are dicts with ``model_id``, ``num_classes`` and
    ``state_dict``; a bare state dict is also accepted.
    """
    if model_id not in _MODELS:
        raise AdapterError(f"unknown model {model_id!r}; registered: {sorted(_MODELS)}")
    spec = _MODELS[model_id]
    if spec.needs_weights and weights_path is None:
        raise LoadError(f"{model_id} requires a weights file (weights_path)")
    state = None
    if weights_path is not None:
        path = Path(weights_path)
        if not path.is_file():
            raise LoadError(f"weights file not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:  # corrupt or foreign file
            raise LoadError(f"cannot read weights {path}: {exc}") from exc
        if isinstance(payload, dict) and "state_dict" in payload:
            if payload.get("model_id", model_id) != model_id:
                raise LoadError(
                    f"checkpoint {path} is for {payload['model_id']!r}, not {model_id!r}"
                )
            num_classes = num_classes or payload.get("num_classes")
            state = payload["state_dict"]
        else:
            state = payload
    kwargs = {"num_classes": num_classes} if num_classes else {}
    adapter = spec.build(**kwargs)
    if spec.extras.get("architecture"):
        adapter.architecture = spec.extras["architecture"]
    if state is not None:
        try:
            adapter.module.load_state_dict(state)
        except RuntimeError as exc:
            raise LoadError(f"weights do not match {model_id}: {exc}") from exc
        adapter.module.eval()
        adapter.checksum = file_checksum(weights_path)
        adapter.weights_path = str(weights_path)
        log.info("loaded %s from %s (sha256 %s)", model_id, weights_path, adapter.checksum[:12])
    return adapter


def is_toy(model_id: str) -> bool:
    return model_id in _MODELS and _MODELS[model_id].toy


def build_module(model_id: str, num_classes: int, seed: int = 0) -> nn.Module:
    """Fresh trainable module for a toy architecture."""
    if not is_toy(model_id):
        raise AdapterError(f"{model_id!r} is not a bundled toy architecture")
    module = _MODELS[model_id].build(num_classes=num_classes, seed=seed).module
    for p in module.parameters():
        p.requires_grad_(True)
    return module
