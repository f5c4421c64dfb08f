"""Layer-wise activation grids for a trained expert."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .backbone import ExpertModel, extract_activations, load_checkpoint
from .ingestion import prepare_input

# Shallow to deep: stem, early 3x3 convs of stage 2, mid/deep 3x3 convs of stage 4.
DEFAULT_UNITS = ("block1", "block2a.conv2", "block2b.conv2", "block4b.conv2", "block4e.conv2")

LABEL_H = 12
PAD = 2


@dataclass(frozen=True)
class VizRequest:
    checkpoint: Path
    image: Path
    output: Path
    unit_ids: tuple[str, ...] = DEFAULT_UNITS
    channels_per_unit: int = 8

    def __post_init__(self):
        if self.channels_per_unit < 1:
            raise ValueError("channels_per_unit must be >= 1")
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))


def select_channels(act: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` channels with the highest mean activation (ties: lower index)."""
    means = act.reshape(act.shape[0], -1).mean(axis=1)
    order = np.argsort(-means, kind="stable")
    return [int(i) for i in order[:k]]


def normalize_map(a: np.ndarray) -> np.ndarray:
    """Min-max to uint8 [0, 255]; constant maps become all zeros."""
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def build_grid(acts: dict[str, np.ndarray], channels_per_unit: int):
    """Tile the selected channels: one labelled row per unit, native tile size."""
    rows, tiles = [], []
    for unit, act in acts.items():
        chans = select_channels(act, channels_per_unit)
        h, w = act.shape[1:]
        rows.append((unit, chans, h, w))
    width = max((PAD + len(c) * (w + PAD) for _, c, _, w in rows), default=1)
    height = sum(LABEL_H + h + PAD for _, _, h, _ in rows) or 1
    canvas = Image.new("L", (max(width, 160), height), color=64)
    draw = ImageDraw.Draw(canvas)
    y = 0
    for unit, chans, h, w in rows:
        draw.text((PAD, y), unit, fill=255)
        y += LABEL_H
        for j, ch in enumerate(chans):
            m = acts[unit][ch]
            x = PAD + j * (w + PAD)
            canvas.paste(Image.fromarray(normalize_map(m), mode="L"), (x, y))
            tiles.append({
                "unit": unit, "channel": ch, "box": [x, y, w, h],
                "min": float(m.min()), "max": float(m.max()),
            })
        y += h + PAD
    return canvas, tiles


def visualize_model(model: ExpertModel, image_path, output, unit_ids=DEFAULT_UNITS,
                    channels_per_unit: int = 8) -> dict:
    image = prepare_input(image_path, model.normalization)
    acts = extract_activations(model, image, list(unit_ids))
    canvas, tiles = build_grid(acts, channels_per_unit)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(output, format="PNG")
    sidecar = {
        "image": str(image_path),
        "channel_selection": "highest mean activation",
        "units": [{"unit": u, "shape": list(acts[u].shape)} for u in unit_ids],
        "tiles": tiles,
    }
    output.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return sidecar


def visualize(req: VizRequest) -> dict:
    model = load_checkpoint(req.checkpoint)
    return visualize_model(model, req.image, req.output, req.unit_ids, req.channels_per_unit)
