"""Procedural captioned-shapes dataset.

Small colored geometric shapes on dark noisy backgrounds, captioned
"a photo of a {color} {shape}". Deterministic given the spec's seed,
cheap enough to regenerate on the fly, and rich enough that a toy dual
encoder learns nontrivial zero-shot structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ValidationError

COLOR_RGB = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
}

SHAPE_NAMES = ("circle", "square", "triangle", "cross")


@dataclass(frozen=True)
class ShapesSpec:
    colors: tuple = ("red", "green", "blue", "yellow")
    shapes: tuple = ("circle", "square", "triangle")
    images_per_class: int = 80
    resolution: int = 32
    seed: int = 0
    noise: float = 0.02

    def __post_init__(self) -> None:
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        for c in self.colors:
            if c not in COLOR_RGB:
                raise ValidationError(f"unknown color {c!r}")
        for s in self.shapes:
            if s not in SHAPE_NAMES:
                raise ValidationError(f"unknown shape {s!r}")
        if self.images_per_class < 1 or self.resolution < 8:
            raise ValidationError("need images_per_class >= 1 and resolution >= 8")

    @property
    def num_classes(self) -> int:
        return len(self.colors) * len(self.shapes)

    @property
    def class_names(self) -> list[str]:
        return [f"{c} {s}" for c in self.colors for s in self.shapes]

    def caption(self, label: int) -> str:
        return f"a photo of a {self.class_names[label]}"

    def to_dict(self) -> dict:
        return {
            "colors": list(self.colors),
            "shapes": list(self.shapes),
            "images_per_class": self.images_per_class,
            "resolution": self.resolution,
            "seed": self.seed,
            "noise": self.noise,
        }

    @staticmethod
    def from_dict(d: dict) -> "ShapesSpec":
        return ShapesSpec(
            colors=tuple(d.get("colors", ("red", "green", "blue", "yellow"))),
            shapes=tuple(d.get("shapes", ("circle", "square", "triangle"))),
            images_per_class=int(d.get("images_per_class", 80)),
            resolution=int(d.get("resolution", 32)),
            seed=int(d.get("seed", 0)),
            noise=float(d.get("noise", 0.02)),
        )


def _shape_mask(shape: str, res: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= r
    if shape == "triangle":
        # apex up: width grows linearly from the apex row to the base row
        inside_y = (yy >= cy - r) & (yy <= cy + r)
        halfwidth = (yy - (cy - r)) / 2.0
        return inside_y & (np.abs(xx - cx) <= halfwidth)
    if shape == "cross":
        arm = max(r / 3.0, 1.0)
        horiz = (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r)
        vert = (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r)
        return horiz | vert
    raise ValidationError(f"unknown shape {shape!r}")


def make_shapes(spec: ShapesSpec) -> tuple[np.ndarray, np.ndarray]:
    """Generate the dataset: images float32 [n, 3, H, W] in [0,1], labels int64."""
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution
    n = spec.num_classes * spec.images_per_class
    images = np.empty((n, 3, res, res), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    idx = 0
    for label, name in enumerate(spec.class_names):
        color_name, shape_name = name.split(" ")
        base_rgb = np.asarray(COLOR_RGB[color_name], dtype=np.float64)
        for _ in range(spec.images_per_class):
            bg = rng.uniform(0.05, 0.30, size=3)
            img = np.tile(bg[:, None, None], (1, res, res))
            cx = res / 2 + rng.uniform(-res / 8, res / 8)
            cy = res / 2 + rng.uniform(-res / 8, res / 8)
            r = rng.uniform(res / 4, res / 2.6)
            mask = _shape_mask(shape_name, res, cx, cy, r)
            tint = base_rgb * rng.uniform(0.75, 1.0)
            img[:, mask] = tint[:, None]
            img += rng.normal(0.0, spec.noise, size=img.shape)
            images[idx] = np.clip(img, 0.0, 1.0).astype(np.float32)
            labels[idx] = label
            idx += 1
    return images, labels
