"""Stochastic augmentation: an ordered chain of gated transforms.

Each transform in a policy carries a gate probability; on every call a
Bernoulli draw decides whether it fires. Draws come from per-transform
counter-based streams keyed on (seed, position in the chain), so one
transform's parameter consumption never shifts another's randomness.
Resize to the policy's output size and per-channel normalization always
run last; the val/test path (eval_transform) applies only those two.

Images come in as RGB uint8 arrays of shape (H, W, 3) and leave as float32
torch tensors of shape (3, out_h, out_w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import cv2
import numpy as np
import torch
from PIL import Image

GATED_KINDS = (
    "horizontal_flip",
    "vertical_flip",
    "rotation",
    "greyscale",
    "gaussian_blur",
    "random_crop",
    "color_jitter",
)

# Upstream-corpus channel statistics of the pretrained backbones.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "horizontal_flip": {},
    "vertical_flip": {},
    "rotation": {"max_degrees": 15.0},
    "greyscale": {},
    "gaussian_blur": {"sigma": (0.1, 2.0)},
    "random_crop": {"scale": (0.6, 1.0)},
    "color_jitter": {"brightness": 0.4, "contrast": 0.4, "saturation": 0.4},
}


class UnknownTransform(ValueError):
    pass


class InvalidRange(ValueError):
    pass


class ImageTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    gate_probability: float
    params: tuple[tuple[str, Any], ...] = ()

    def param(self, name: str) -> Any:
        return dict(self.params)[name]


@dataclass(frozen=True)
class AugmentationPolicy:
    transforms: tuple[TransformSpec, ...]
    output_size: tuple[int, int]  # (h, w)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


def _check_range(kind: str, name: str, value: Any) -> None:
    if isinstance(value, (tuple, list)):
        lo, hi = value
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise InvalidRange(f"{kind}.{name}: empty range {value}")
    else:
        if not (math.isfinite(value) and value >= 0):
            raise InvalidRange(f"{kind}.{name}: {value}")


def build_policy(config: Mapping[str, Any]) -> AugmentationPolicy:
    """Build a policy from the ``augmentation:`` config section.

    Transform order follows the config exactly; omitted parameters take
    their defaults. Unknown kinds and out-of-range values are rejected.
    """
    output_size = tuple(config.get("output_size", (288, 288)))
    if len(output_size) != 2 or min(output_size) < 1:
        raise InvalidRange(f"output_size: {output_size}")
    norm = config.get("normalization", {})
    mean = tuple(float(v) for v in norm.get("mean", IMAGENET_MEAN))
    std = tuple(float(v) for v in norm.get("std", IMAGENET_STD))
    if len(mean) != 3 or len(std) != 3:
        raise InvalidRange("normalization stats must have 3 channels")
    if min(std) <= 0:
        raise InvalidRange(f"normalization std must be positive, got {std}")

    transforms = []
    for entry in config.get("transforms", ()):
        kind = entry.get("kind")
        if kind not in GATED_KINDS:
            raise UnknownTransform(str(kind))
        gate = float(entry.get("gate_probability", 0.5))
        if not 0.0 <= gate <= 1.0:
            raise InvalidRange(f"{kind}.gate_probability: {gate}")
        params = dict(DEFAULT_PARAMS[kind])
        for key, value in entry.items():
            if key in ("kind", "gate_probability"):
                continue
            if key not in params:
                raise UnknownTransform(f"{kind}.{key}")
            params[key] = tuple(value) if isinstance(value, (tuple, list)) else float(value)
        for key, value in params.items():
            _check_range(kind, key, value)
        transforms.append(TransformSpec(kind=kind, gate_probability=gate,
                                        params=tuple(sorted(params.items()))))
    return AugmentationPolicy(transforms=tuple(transforms), output_size=output_size,
                              mean=mean, std=std)


def default_policy(output_size: tuple[int, int] = (288, 288),
                   gate_probability: float = 0.5) -> AugmentationPolicy:
    """All seven gated transforms in registry order at one shared gate."""
    return build_policy({
        "output_size": output_size,
        "transforms": [
            {"kind": kind, "gate_probability": gate_probability} for kind in GATED_KINDS
        ],
    })


def _position_rng(seed: int, position: int) -> np.random.Generator:
    # Philox keyed on (seed, position): independent stream per chain slot.
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, position]))


def draw_gates(policy: AugmentationPolicy, seed: int) -> list[bool]:
    """The gate decisions apply() will make for this (policy, seed) pair."""
    gates = []
    for position, spec in enumerate(policy.transforms):
        rng = _position_rng(seed, position)
        gates.append(bool(rng.random() < spec.gate_probability))
    return gates


def _flip_h(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1]


def _flip_v(img: np.ndarray) -> np.ndarray:
    return img[::-1]


def _rotate(img: np.ndarray, rng: np.random.Generator, max_degrees: float) -> np.ndarray:
    angle = rng.uniform(-max_degrees, max_degrees)
    h, w = img.shape[:2]
    matrix = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
    return cv2.warpAffine(np.ascontiguousarray(img), matrix, (w, h),
                          flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)


def _greyscale(img: np.ndarray) -> np.ndarray:
    # Luminance replicated to 3 channels so the tensor shape stays stable.
    luma = img @ np.asarray([0.299, 0.587, 0.114], dtype=np.float32)
    return np.repeat(luma[:, :, None], 3, axis=2)


def _blur(img: np.ndarray, rng: np.random.Generator, sigma: tuple[float, float]) -> np.ndarray:
    value = rng.uniform(sigma[0], sigma[1])
    return cv2.GaussianBlur(np.ascontiguousarray(img), (0, 0), sigmaX=value, sigmaY=value)


def _random_crop(img: np.ndarray, rng: np.random.Generator,
                 scale: tuple[float, float]) -> np.ndarray:
    # scale is an area fraction; aspect ratio is preserved.
    h, w = img.shape[:2]
    area = rng.uniform(scale[0], scale[1])
    side = math.sqrt(area)
    crop_h = max(1, round(h * side))
    crop_w = max(1, round(w * side))
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    return img[top:top + crop_h, left:left + crop_w]


def _color_jitter(img: np.ndarray, rng: np.random.Generator, brightness: float,
                  contrast: float, saturation: float) -> np.ndarray:
    # Fixed order brightness -> contrast -> saturation; factors U(1-d, 1+d).
    b = rng.uniform(1.0 - brightness, 1.0 + brightness)
    c = rng.uniform(1.0 - contrast, 1.0 + contrast)
    s = rng.uniform(1.0 - saturation, 1.0 + saturation)
    out = img * b
    grey_mean = np.float32((out @ np.asarray([0.299, 0.587, 0.114], dtype=np.float32)).mean())
    out = (out - grey_mean) * c + grey_mean
    luma = out @ np.asarray([0.299, 0.587, 0.114], dtype=np.float32)
    out = (out - luma[:, :, None]) * s + luma[:, :, None]
    return np.clip(out, 0.0, 1.0)


def _apply_transform(spec: TransformSpec, img: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    kind = spec.kind
    if kind == "horizontal_flip":
        return _flip_h(img)
    if kind == "vertical_flip":
        return _flip_v(img)
    if kind == "rotation":
        return _rotate(img, rng, spec.param("max_degrees"))
    if kind == "greyscale":
        return _greyscale(img)
    if kind == "gaussian_blur":
        return _blur(img, rng, spec.param("sigma"))
    if kind == "random_crop":
        return _random_crop(img, rng, spec.param("scale"))
    if kind == "color_jitter":
        return _color_jitter(img, rng, spec.param("brightness"),
                             spec.param("contrast"), spec.param("saturation"))
    raise UnknownTransform(kind)


def _as_float_array(image: np.ndarray | Image.Image) -> np.ndarray:
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"))
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return np.ascontiguousarray(image, dtype=np.float32)


def _finish(img: np.ndarray, policy: AugmentationPolicy) -> torch.Tensor:
    out_h, out_w = policy.output_size
    h, w = img.shape[:2]
    if h < out_h or w < out_w:
        raise ImageTooSmall(f"{w}x{h} after transforms, need at least {out_w}x{out_h}")
    if (h, w) != (out_h, out_w):
        img = cv2.resize(np.ascontiguousarray(img), (out_w, out_h),
                         interpolation=cv2.INTER_AREA)
    mean = np.asarray(policy.mean, dtype=np.float32)
    std = np.asarray(policy.std, dtype=np.float32)
    img = (img - mean) / std
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def apply(policy: AugmentationPolicy, image: np.ndarray | Image.Image,
          seed: int) -> torch.Tensor:
    """Run the gated chain, then resize and normalize.

    Pure in (policy, image, seed): identical inputs produce bit-identical
    tensors. Raises ImageTooSmall when the image, after any crop, is
    smaller than the policy's output size (no silent upscaling).
    """
    img = _as_float_array(image)
    for position, spec in enumerate(policy.transforms):
        rng = _position_rng(seed, position)
        fired = rng.random() < spec.gate_probability
        if fired:
            img = _apply_transform(spec, img, rng)
    return _finish(img, policy)


def eval_transform(policy: AugmentationPolicy,
                   image: np.ndarray | Image.Image) -> torch.Tensor:
    """Deterministic val/test path: resize and normalize only."""
    return _finish(_as_float_array(image), policy)


def denormalize(tensor: torch.Tensor, policy: AugmentationPolicy) -> torch.Tensor:
    """Inverse of the normalization step; result is in [0, 1] image space."""
    mean = torch.tensor(policy.mean, dtype=tensor.dtype).view(3, 1, 1)
    std = torch.tensor(policy.std, dtype=tensor.dtype).view(3, 1, 1)
    return tensor * std + mean


def dump_samples(policy: AugmentationPolicy, image: np.ndarray | Image.Image,
                 out_dir: Path | str, n: int = 8, seed: int = 0) -> list[Path]:
    """Write n augmented variants as PNGs for visual inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        tensor = apply(policy, image, seed + i)
        arr = denormalize(tensor, policy).clamp(0, 1).numpy()
        arr = (arr.transpose(1, 2, 0) * 255).astype(np.uint8)
        path = out_dir / f"sample_{i:03d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
