"""Fine-tuning of one binary expert under a freeze policy."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (
    STAGE3_5_POLICY,
    BackboneConfig,
    ExpertModel,
    FreezePolicy,
    build_backbone,
)
from .datamodel import (
    DatasetManifest,
    ExpertKind,
    SampleRecord,
    Split,
    relabel_for_expert,
)
from .ingestion import load_rgb

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.8
    beta2: float = 0.888
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.algorithm != "adam":
            raise ValueError(f"unsupported optimizer {self.algorithm!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")

    def build(self, params) -> torch.optim.Adam:
        return torch.optim.Adam(
            params,
            lr=self.learning_rate,
            betas=(self.beta1, self.beta2),
            eps=self.epsilon,
            weight_decay=0.0,
        )


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    freeze_policy: FreezePolicy = STAGE3_5_POLICY
    loss: str = "cross_entropy"
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze_policy"] = self.freeze_policy.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if "freeze_policy" in d:
            d["freeze_policy"] = FreezePolicy(frozenset(d["freeze_policy"]))
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    accuracy: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    @property
    def losses(self) -> list[float]:
        return [e.mean_loss for e in self.epochs]

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs]}


def make_batches(records: Sequence, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Shuffle ``records`` with a permutation keyed by (seed, epoch) and chunk it.

    The final partial batch is kept.
    """
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    items = [records[i] for i in order]
    return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]


def expert_pool(records: Sequence[SampleRecord], kind: ExpertKind) -> list[tuple[SampleRecord, int]]:
    """Records with a defined binary target for ``kind``, paired with that target."""
    out = []
    for r in records:
        y = relabel_for_expert(r.label, kind)
        if y is not None:
            out.append((r, int(y)))
    return out


class ImageCache:
    """Decoded uint8 images keyed by path; decoding happens once per run."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}

    def get(self, path) -> np.ndarray:
        key = str(path)
        if key not in self._store:
            self._store[key] = load_rgb(path)
        return self._store[key]


def _batch_tensor(model: ExpertModel, cache: ImageCache, records: Sequence[SampleRecord]) -> torch.Tensor:
    arr = np.stack([model.normalization.apply(cache.get(r.image_path)) for r in records])
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy()).to(model.dtype)


def train_step(model: ExpertModel, optimizer: torch.optim.Optimizer,
               x: torch.Tensor, y: torch.Tensor) -> tuple[float, int]:
    optimizer.zero_grad(set_to_none=True)
    logits = model.net(x)
    loss = F.cross_entropy(logits, y)
    loss.backward()
    optimizer.step()
    correct = int((logits.argmax(1) == y).sum())
    return float(loss.detach()), correct


def recalibrate_bn(model: ExpertModel, batches) -> None:
    """Recompute running statistics of every non-frozen BatchNorm layer.

    Uses a cumulative average over ``batches`` (tensors) in training mode
    without gradients. Frozen units keep their statistics untouched.
    """
    bns = [m for name, m in model.net.named_modules()
           if isinstance(m, torch.nn.BatchNorm2d) and name not in model.net.frozen_bn]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    model.net.train()
    with torch.no_grad():
        for x in batches:
            model.net(x)
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.net.eval()


def train_expert(kind: ExpertKind, manifest: DatasetManifest | Sequence[SampleRecord],
                 config: TrainConfig, backbone_cfg: BackboneConfig,
                 cache: ImageCache | None = None) -> tuple[ExpertModel, TrainHistory]:
    """Build, freeze and fine-tune one expert on the TRAIN records of ``manifest``.

    ``manifest`` may also be a plain record list (protocol pools); only
    records tagged TRAIN are used either way.
    """
    kind = ExpertKind(kind)
    records = manifest.records if isinstance(manifest, DatasetManifest) else manifest
    pool = expert_pool([r for r in records if r.split == Split.TRAIN], kind)
    if not pool:
        raise TrainingError(f"no training samples for the {kind.value} expert")

    torch.manual_seed(config.seed)
    model = build_backbone(backbone_cfg, kind, config.freeze_policy)
    optimizer = config.optimizer.build(model.trainable_parameters())
    cache = cache or ImageCache()
    history = TrainHistory()

    model.net.train()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        total_loss, total_correct, seen = 0.0, 0, 0
        for bi, batch in enumerate(make_batches(pool, config.batch_size, config.seed, epoch)):
            x = _batch_tensor(model, cache, [r for r, _ in batch])
            y = torch.tensor([t for _, t in batch], dtype=torch.long)
            loss, correct = train_step(model, optimizer, x, y)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            total_loss += loss * len(batch)
            total_correct += correct
            seen += len(batch)
        rec = EpochRecord(epoch, total_loss / seen, total_correct / seen, time.perf_counter() - t0)
        history.epochs.append(rec)
        log.info("%s epoch %d: loss %.4f acc %.3f (%.1fs)", kind.value, epoch, rec.mean_loss, rec.accuracy, rec.seconds)
    if config.recalibrate_bn:
        recalibrate_bn(model, (
            _batch_tensor(model, cache, [r for r, _ in batch])
            for batch in make_batches(pool, config.batch_size, config.seed, 0)
        ))
    model.net.eval()
    return model, history
