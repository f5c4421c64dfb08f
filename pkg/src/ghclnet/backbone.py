"""Five-stage bottleneck residual backbone with a declarative freeze policy.

Parameter names follow torchvision's ResNet-50 layout (``conv1``, ``bn1``,
``layer1`` .. ``layer4``, ``fc``) so ImageNet weights load without remapping.
Units are addressed by stage name instead:

    block1            stem conv + BN (+ ReLU, 112x112 at input 224)
    block2 .. block5  whole stages (torchvision layer1 .. layer4)
    block3a, block5c  single bottleneck sub-blocks, lettered from ``a``
    head              the new 2-way classifier
"""

from __future__ import annotations

import io
import json
import math
import re
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ExpertKind
from .ingestion import INPUT_SIZE, Normalization, ImageTensor

STEM_WIDTH = 64
STAGE_WIDTHS = (64, 128, 256, 512)
EXPANSION = 4
RESNET50_STAGE_BLOCKS = (1, 3, 4, 6, 3)
RESNET50_URL = "https://download.pytorch.org/models/resnet50-0676ba61.pth"


class PretrainedWeightsUnavailable(RuntimeError):
    pass


class UnknownUnitError(KeyError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = INPUT_SIZE
    stage_blocks: tuple[int, ...] = RESNET50_STAGE_BLOCKS
    width_scale: float = 1.0
    pretrained: bool = True
    num_outputs: int = 2
    seed: int = 0
    weights_path: str | None = None  # local ImageNet state dict; otherwise the torch hub cache

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        if not 0.0 < self.width_scale <= 1.0:
            raise ValueError(f"width_scale must be in (0, 1], got {self.width_scale}")
        if self.pretrained and self.width_scale < 1.0:
            raise ValueError("pretrained weights require width_scale == 1.0")
        if self.pretrained and self.stage_blocks != RESNET50_STAGE_BLOCKS:
            raise ValueError(f"pretrained weights require stage_blocks == {RESNET50_STAGE_BLOCKS}")
        if len(self.stage_blocks) != 5 or self.stage_blocks[0] != 1:
            raise ValueError("stage_blocks must be [1 (stem), n2, n3, n4, n5]")
        if any(b < 1 for b in self.stage_blocks):
            raise ValueError("every stage needs at least one sub-block")
        if self.num_outputs != 2:
            raise ValueError("experts are binary: num_outputs must be 2")

    def scaled(self, channels: int) -> int:
        return int(math.ceil(channels * self.width_scale))

    @property
    def stem_width(self) -> int:
        return self.scaled(STEM_WIDTH)

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.scaled(c) for c in STAGE_WIDTHS)

    def unit_ids(self) -> list[str]:
        ids = ["block1"]
        for stage, n in enumerate(self.stage_blocks[1:], start=2):
            ids.append(f"block{stage}")
            ids.extend(f"block{stage}{chr(ord('a') + i)}" for i in range(n))
        ids.append("head")
        return ids

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


@dataclass(frozen=True)
class FreezePolicy:
    trainable_units: frozenset[str] = field(default_factory=lambda: frozenset({"block3", "block5", "head"}))

    def __post_init__(self):
        object.__setattr__(self, "trainable_units", frozenset(self.trainable_units))
        if "head" not in self.trainable_units:
            raise ValueError("freeze policy must keep 'head' trainable")

    def to_list(self) -> list[str]:
        return sorted(self.trainable_units)


STAGE3_5_POLICY = FreezePolicy(frozenset({"block3", "block5", "head"}))
SMALL_DATA_POLICY = FreezePolicy(frozenset({"block5c", "head"}))
FULL_POLICY = FreezePolicy(frozenset({"block1", "block2", "block3", "block4", "block5", "head"}))


# --------------------------------------------------------------------------
# network

class Bottleneck(nn.Module):
    def __init__(self, in_ch: int, width: int, stride: int):
        super().__init__()
        out_ch = width * EXPANSION
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.relu2 = nn.ReLU()
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu3 = nn.ReLU()
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.relu2(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu3(out + identity)


class ResNetBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(3, config.stem_width, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(config.stem_width)
        self.relu = nn.ReLU()
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        in_ch = config.stem_width
        for i, (n, width) in enumerate(zip(config.stage_blocks[1:], config.stage_widths)):
            stride = 1 if i == 0 else 2
            blocks = []
            for b in range(n):
                blocks.append(Bottleneck(in_ch, width, stride if b == 0 else 1))
                in_ch = width * EXPANSION
            setattr(self, f"layer{i + 1}", nn.Sequential(*blocks))
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(in_ch, config.num_outputs)
        self.frozen_bn: set[str] = set()

    def features(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))

    def forward(self, x):
        return self.fc(torch.flatten(self.avgpool(self.features(x)), 1))

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen units keep BN running statistics fixed
        if mode:
            for name, mod in self.named_modules():
                if name in self.frozen_bn:
                    mod.eval()
        return self


def unit_prefix(unit: str) -> tuple[str, ...]:
    """Parameter-name prefixes belonging to ``unit``."""
    if unit == "block1":
        return ("conv1.", "bn1.")
    if unit == "head":
        return ("fc.",)
    m = re.fullmatch(r"block([2-5])([a-z]?)", unit)
    if not m:
        raise UnknownUnitError(unit)
    layer = f"layer{int(m.group(1)) - 1}"
    if not m.group(2):
        return (f"{layer}.",)
    return (f"{layer}.{ord(m.group(2)) - ord('a')}.",)


def unit_of(param_name: str, config: BackboneConfig) -> str:
    """Finest unit containing ``param_name`` (sub-block for stage parameters)."""
    if param_name.startswith(("conv1.", "bn1.")):
        return "block1"
    if param_name.startswith("fc."):
        return "head"
    m = re.match(r"layer(\d)\.(\d+)\.", param_name)
    if not m:
        raise UnknownUnitError(param_name)
    return f"block{int(m.group(1)) + 1}{chr(ord('a') + int(m.group(2)))}"


def _init_weights(net: ResNetBackbone, seed: int, head_only: bool = False) -> None:
    gen = torch.Generator().manual_seed(seed)
    for name, mod in net.named_modules():
        if head_only and name != "fc":
            continue
        if isinstance(mod, nn.Conv2d):
            nn.init.kaiming_normal_(mod.weight, mode="fan_out", nonlinearity="relu", generator=gen)
        elif isinstance(mod, nn.BatchNorm2d):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.Linear):
            bound = 1.0 / math.sqrt(mod.in_features)
            nn.init.uniform_(mod.weight, -bound, bound, generator=gen)
            nn.init.uniform_(mod.bias, -bound, bound, generator=gen)


def load_pretrained_state(config: BackboneConfig) -> dict:
    try:
        if config.weights_path:
            return torch.load(config.weights_path, map_location="cpu", weights_only=True)
        return torch.hub.load_state_dict_from_url(RESNET50_URL, map_location="cpu", progress=False)
    except Exception as exc:  # network, missing file, corrupt archive
        raise PretrainedWeightsUnavailable(
            f"could not load ImageNet ResNet-50 weights ({exc}); set weights_path or use pretrained=False"
        ) from exc


class ExpertModel:
    """One binary expert: backbone + head, its freeze policy and provenance."""

    def __init__(self, kind: ExpertKind, config: BackboneConfig, net: ResNetBackbone,
                 policy: FreezePolicy | None = None,
                 normalization: Normalization = Normalization()):
        self.kind = ExpertKind(kind)
        self.config = config
        self.net = net
        self.normalization = normalization
        self.policy = policy or FreezePolicy(frozenset(config.unit_ids()))
        self._apply_marking(self.policy)

    @property
    def dtype(self) -> torch.dtype:
        return self.net.fc.weight.dtype

    def _apply_marking(self, policy: FreezePolicy) -> None:
        valid = set(self.config.unit_ids())
        unknown = sorted(policy.trainable_units - valid)
        if unknown:
            raise UnknownUnitError(f"unknown unit(s) {unknown}; valid: {sorted(valid)}")
        prefixes = tuple(p for u in policy.trainable_units for p in unit_prefix(u))
        for name, p in self.net.named_parameters():
            p.requires_grad_(name.startswith(prefixes))
        frozen_bn = set()
        for name, mod in self.net.named_modules():
            if isinstance(mod, nn.BatchNorm2d) and not (name + ".").startswith(prefixes):
                frozen_bn.add(name)
        self.net.frozen_bn = frozen_bn
        self.policy = policy

    def is_trainable(self, param_name: str) -> bool:
        return dict(self.net.named_parameters())[param_name].requires_grad

    def trainable_map(self) -> dict[str, bool]:
        return {n: p.requires_grad for n, p in self.net.named_parameters()}

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for p in self.net.parameters() if p.requires_grad]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}


def build_backbone(config: BackboneConfig, kind: ExpertKind,
                   policy: FreezePolicy | None = None) -> ExpertModel:
    net = ResNetBackbone(config)
    _init_weights(net, config.seed)
    if config.pretrained:
        state = load_pretrained_state(config)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        missing, unexpected = net.load_state_dict(state, strict=False)
        if unexpected or any(not k.startswith("fc.") for k in missing):
            raise PretrainedWeightsUnavailable(
                f"weights do not match the backbone (missing={missing[:4]}, unexpected={unexpected[:4]})"
            )
        _init_weights(net, config.seed, head_only=True)
    net.eval()
    return ExpertModel(kind, config, net, policy)


def apply_freeze(model: ExpertModel, policy: FreezePolicy) -> ExpertModel:
    model._apply_marking(policy)
    return model


# --------------------------------------------------------------------------
# shapes, inference, activations

def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def feature_shapes(config: BackboneConfig) -> list[tuple[int, int]]:
    """Spatial size after each stage for a square input of ``config.input_size``."""
    n = _conv_out(config.input_size, 7, 2, 3)
    out = [(1, n)]
    n = _conv_out(n, 3, 2, 1)  # max pool; stage 2 keeps stride 1
    out.append((2, n))
    for stage in (3, 4, 5):
        n = _conv_out(n, 3, 2, 1)
        out.append((stage, n))
    return out


def to_batch(batch: Sequence[ImageTensor], dtype=torch.float32, size: int = INPUT_SIZE) -> torch.Tensor:
    for t in batch:
        if t.data.shape != (size, size, 3):
            raise ValueError(f"{t.source_id}: expected ({size}, {size}, 3), got {t.data.shape}")
    arr = np.stack([t.data for t in batch]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def forward(model: ExpertModel, batch: Sequence[ImageTensor]) -> np.ndarray:
    """Class probabilities, shape (N, 2); column 1 is the expert's positive class."""
    if len(batch) == 0:
        return np.zeros((0, 2))
    x = to_batch(batch, model.dtype, model.config.input_size)
    was_training = model.net.training
    model.net.eval()
    with torch.no_grad():
        # one sample at a time: rows never depend on batch composition
        logits = torch.cat([model.net(x[i:i + 1]) for i in range(x.shape[0])])
        probs = torch.softmax(logits, dim=1)
    model.net.train(was_training)
    return probs.double().numpy()


def _activation_module(net: ResNetBackbone, unit: str) -> nn.Module:
    if unit == "block1":
        return net.relu
    m = re.fullmatch(r"block([2-5])([a-z]?)(?:\.conv([123]))?", unit)
    if not m:
        raise UnknownUnitError(unit)
    layer = getattr(net, f"layer{int(m.group(1)) - 1}")
    if not m.group(2):
        if m.group(3):
            raise UnknownUnitError(unit)
        return layer
    idx = ord(m.group(2)) - ord("a")
    if idx >= len(layer):
        raise UnknownUnitError(unit)
    block = layer[idx]
    return getattr(block, f"relu{m.group(3) or 3}")


def extract_activations(model: ExpertModel, image: ImageTensor,
                        unit_ids: Sequence[str]) -> dict[str, np.ndarray]:
    """Post-activation feature maps (C, H, W) for each requested unit, in request order.

    Besides the unit ids of the freeze policy, ``blockNx.conv1`` / ``.conv2``
    address the ReLU outputs inside a bottleneck.
    """
    modules = [(u, _activation_module(model.net, u)) for u in unit_ids]
    captured: dict[str, torch.Tensor] = {}
    handles = []
    for u, mod in modules:
        def hook(_m, _inp, out, u=u):
            captured[u] = out.detach()
        handles.append(mod.register_forward_hook(hook))
    was_training = model.net.training
    model.net.eval()
    try:
        with torch.no_grad():
            model.net(to_batch([image], model.dtype, model.config.input_size))
    finally:
        for h in handles:
            h.remove()
        model.net.train(was_training)
    return {u: captured[u][0].double().numpy() for u in unit_ids}


# --------------------------------------------------------------------------
# checkpoints

METADATA_FILE = "metadata.json"
PARAMS_FILE = "parameters.npz"


def write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """Byte-stable ``.npz`` (fixed member timestamps, sorted names)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_checkpoint(model: ExpertModel, out_dir, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "ghclnet-checkpoint/1",
        "kind": model.kind.value,
        "expert": model.kind.name,
        "backbone": model.config.to_dict(),
        "freeze_policy": model.policy.to_list(),
        "seed": model.config.seed,
        "normalization": {"mean": list(model.normalization.mean), "std": list(model.normalization.std)},
        "dtype": str(model.dtype).replace("torch.", ""),
    }
    if extra:
        meta.update(extra)
    (out_dir / METADATA_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_npz(out_dir / PARAMS_FILE, model.state_arrays())
    return out_dir


def load_checkpoint(ckpt_dir) -> ExpertModel:
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / METADATA_FILE).read_text())
    # weights come from the checkpoint, never from the network
    cfg = BackboneConfig.from_dict(meta["backbone"])
    net = ResNetBackbone(cfg)
    with np.load(ckpt_dir / PARAMS_FILE) as npz:
        state = {k: torch.from_numpy(npz[k]) for k in npz.files}
    net.load_state_dict(state, strict=True)
    if meta.get("dtype") == "float64":
        net.double()
    net.eval()
    norm = Normalization(tuple(meta["normalization"]["mean"]), tuple(meta["normalization"]["std"]))
    return ExpertModel(ExpertKind(meta["kind"]), cfg, net, FreezePolicy(frozenset(meta["freeze_policy"])), norm)

