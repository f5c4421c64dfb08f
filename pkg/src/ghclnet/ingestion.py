"""Image decoding into the backbone's input tensor, plus a synthetic iris dataset."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageFilter, UnidentifiedImageError

from .datamodel import (
    DatasetManifest,
    Eye,
    LabelClass,
    SampleRecord,
    Split,
    save_manifest,
)

INPUT_SIZE = 224
# Channel statistics of the ImageNet-pretrained residual backbone weights.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ImageDecodeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageTensor:
    data: np.ndarray  # (H, W, 3) float32, normalized
    source_id: str = ""


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def apply(self, rgb_uint8: np.ndarray) -> np.ndarray:
        x = rgb_uint8.astype(np.float32) / 255.0
        return (x - np.asarray(self.mean, np.float32)) / np.asarray(self.std, np.float32)


DEFAULT_NORMALIZATION = Normalization()


def load_rgb(path, size: int = INPUT_SIZE) -> np.ndarray:
    """Decode ``path`` to a (size, size, 3) uint8 array.

    Grayscale is replicated across channels. Resizing is a plain bilinear
    resize with no aspect-ratio preservation; images already at ``size``
    are left untouched.
    """
    try:
        with Image.open(path) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise ImageDecodeError(f"{path}: zero-sized image")
            im = im.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    if im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.uint8)


def prepare_input(path, normalization: Normalization = DEFAULT_NORMALIZATION,
                  source_id: str | None = None) -> ImageTensor:
    rgb = load_rgb(path)
    data = normalization.apply(rgb)
    if not np.isfinite(data).all():
        raise ImageDecodeError(f"{path}: non-finite values after normalization")
    return ImageTensor(data=data, source_id=source_id if source_id is not None else str(path))


# --------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int = 10
    image_size: int = INPUT_SIZE
    noise_level: float = 0.1
    seed: int = 0
    n_sensors: int = 2
    subjects_per_split: int = 5

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must be in [0, 1]")
        if self.n_sensors < 1:
            raise ValueError("n_sensors must be >= 1")


@dataclass(frozen=True)
class SensorProfile:
    sensor_id: str
    brightness: float  # additive, gray levels
    blur: float  # gaussian radius in pixels at 224


def sensor_profiles(n: int) -> list[SensorProfile]:
    out = []
    for k in range(n):
        name = f"SYN-{chr(ord('A') + k)}" if k < 26 else f"SYN-{k}"
        out.append(SensorProfile(name, brightness=12.0 * k * (-1) ** k, blur=0.6 * (k % 3)))
    return out


def render_eye(label: LabelClass, size: int, rng: np.random.Generator,
               noise_level: float, profile: SensorProfile) -> np.ndarray:
    """Render one grayscale synthetic eye as uint8 (size, size)."""
    s = size / INPUT_SIZE
    cy, cx = (size - 1) / 2 + rng.normal(0, 4 * s, 2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)

    r_iris = size * rng.uniform(0.33, 0.37)
    r_pupil = size * rng.uniform(0.10, 0.13)

    # sclera / skin background with a soft vertical gradient
    img = 175.0 + 20.0 * (yy / size - 0.5)
    # iris: smooth radial gradient plus mild radial fibres
    iris = r < r_iris
    t = np.clip((r - r_pupil) / (r_iris - r_pupil), 0, 1)
    fibres = 6.0 * np.sin(rng.integers(20, 40) * theta + rng.uniform(0, 2 * np.pi))
    img = np.where(iris, 95.0 + 35.0 * t + fibres, img)
    # pupil
    img = np.where(r < r_pupil, 20.0, img)

    if label == LabelClass.SOFT_LENS:
        # one low-contrast ring just outside the limbus: the lens edge
        r_ring = r_iris * rng.uniform(1.08, 1.14)
        ring = np.exp(-0.5 * ((r - r_ring) / (3.0 * s)) ** 2)
        img = img - 60.0 * ring
    elif label == LabelClass.COSMETIC_LENS:
        # tinted lens with a printed dot-matrix texture over the iris annulus
        k_t = rng.integers(40, 56)
        k_r = rng.uniform(0.35, 0.45) / s
        pattern = np.sign(np.sin(k_t * theta + rng.uniform(0, 6.3)) * np.sin(k_r * r + rng.uniform(0, 6.3)))
        annulus = (r > r_pupil * 1.25) & (r < r_iris * 0.98)
        img = np.where(annulus, img + 40.0 + 30.0 * pattern, img)

    img = img + profile.brightness
    if noise_level > 0:
        img = img + rng.normal(0.0, 25.0 * noise_level, img.shape)
    out = Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8), mode="L")
    if profile.blur > 0:
        out = out.filter(ImageFilter.GaussianBlur(profile.blur * s))
    return np.asarray(out)


def synth_generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write a three-class synthetic dataset under ``out_dir``.

    Produces ``3 * n_per_class * n_sensors`` PNGs and ``manifest.jsonl``.
    Per class and sensor the first half of the images goes to TRAIN and the
    rest to TEST; train and test draw subjects from disjoint pools.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    n_train = (spec.n_per_class + 1) // 2
    records = []
    for si, profile in enumerate(sensor_profiles(spec.n_sensors)):
        for ci, label in enumerate(LabelClass):
            for i in range(spec.n_per_class):
                rng = np.random.default_rng([spec.seed, si, ci, i])
                arr = render_eye(label, spec.image_size, rng, spec.noise_level, profile)
                split = Split.TRAIN if i < n_train else Split.TEST
                k = i if split == Split.TRAIN else i - n_train
                subject = f"{profile.sensor_id}-{split.value}-{k % spec.subjects_per_split:02d}"
                sample_id = f"{profile.sensor_id}_{label.value}_{i:04d}"
                path = img_dir / f"{sample_id}.png"
                Image.fromarray(arr, mode="L").save(path, format="PNG")
                records.append(SampleRecord(
                    sample_id=sample_id,
                    image_path=path,
                    sensor_id=profile.sensor_id,
                    subject_id=subject,
                    eye=Eye.LEFT if i % 2 == 0 else Eye.RIGHT,
                    label=label,
                    split=split,
                ))
    manifest = DatasetManifest(name=out_dir.name or "synthetic", records=tuple(records))
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
