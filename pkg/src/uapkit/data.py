"""Dataset manifests (JSON header + JSON-lines entries) and image loading."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import ValidationError
from .shapes import ShapesSpec, make_shapes

MANIFEST_SCHEMA = "uapkit/dataset@1"

KIND_CLASSIFICATION = "classification"
KIND_CAPTIONED = "captioned"


@dataclass
class DatasetEntry:
    image: str
    label: int | None = None
    captions: list[str] | None = None

    def to_dict(self) -> dict:
        d = {"image": self.image}
        if self.label is not None:
            d["label"] = int(self.label)
        if self.captions is not None:
            d["captions"] = list(self.captions)
        return d


@dataclass
class DatasetManifest:
    id: str
    kind: str
    root: Path
    entries: list[DatasetEntry]
    class_names: list[str] | None = None
    prompt_template: str = "a photo of a {}"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in (KIND_CLASSIFICATION, KIND_CAPTIONED):
            raise ValidationError(f"unknown manifest kind {self.kind!r}")
        if not self.entries:
            raise ValidationError("manifest has no entries")
        if "{}" not in self.prompt_template:
            raise ValidationError("prompt_template must contain a '{}' placeholder")
        self.root = Path(self.root)
        if self.kind == KIND_CLASSIFICATION:
            if not self.class_names:
                raise ValidationError("classification manifest requires class_names")
            n = len(self.class_names)
            for e in self.entries:
                if e.label is None or not (0 <= e.label < n):
                    raise ValidationError(f"entry {e.image!r} has no valid label")
        else:
            for e in self.entries:
                if not e.captions:
                    raise ValidationError(f"entry {e.image!r} has no captions")

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, index: int) -> Path:
        return self.root / self.entries[index].image

    def labels(self) -> np.ndarray:
        return np.asarray([e.label for e in self.entries], dtype=np.int64)

    def save(self, path: str | Path) -> Path:
        """Header line then one JSON line per entry; root stored relative to
        the manifest file when possible, for relocatability."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            root_str = os.path.relpath(self.root.resolve(), path.resolve().parent)
        except ValueError:
            root_str = str(self.root.resolve())
        header = {
            "schema": MANIFEST_SCHEMA,
            "id": self.id,
            "kind": self.kind,
            "root": root_str,
            "prompt_template": self.prompt_template,
        }
        if self.class_names is not None:
            header["class_names"] = list(self.class_names)
        with open(path, "w") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for e in self.entries:
                f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        return path

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        path = Path(path)
        with open(path) as f:
            lines = [line for line in f if line.strip()]
        if not lines:
            raise ValidationError(f"empty manifest file {path}")
        header = json.loads(lines[0])
        if header.get("schema") != MANIFEST_SCHEMA:
            raise ValidationError(f"unsupported manifest schema {header.get('schema')!r}")
        root = Path(header["root"])
        if not root.is_absolute():
            root = path.resolve().parent / root
        entries = []
        for line in lines[1:]:
            d = json.loads(line)
            entries.append(
                DatasetEntry(image=d["image"], label=d.get("label"), captions=d.get("captions"))
            )
        return DatasetManifest(
            id=header["id"],
            kind=header["kind"],
            root=root,
            entries=entries,
            class_names=header.get("class_names"),
            prompt_template=header.get("prompt_template", "a photo of a {}"),
        )


def _read_image(path: Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def load_images(
    manifest: DatasetManifest,
    indices,
    resolution: tuple[int, int],
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Load entries as a [n,3,H,W] tensor in [0,1] at the given resolution.

    Decoded tensors are memoized on the manifest; fine at the dataset sizes
    this toolkit targets.
    """
    h, w = int(resolution[0]), int(resolution[1])
    out = []
    for i in indices:
        i = int(i)
        key = (i, h, w)
        t = manifest._cache.get(key)
        if t is None:
            t = _read_image(manifest.image_path(i))
            if tuple(t.shape[1:]) != (h, w):
                t = F.interpolate(
                    t.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=True
                ).squeeze(0)
                t = t.clamp(0.0, 1.0)
            manifest._cache[key] = t
        out.append(t)
    return torch.stack(out).to(dtype)


def render_shapes_dataset(
    out_dir: str | Path,
    spec: ShapesSpec,
    kind: str = KIND_CLASSIFICATION,
    dataset_id: str | None = None,
    prompt_template: str = "a photo of a {}",
) -> Path:
    """Render the procedural shapes to PNG files plus a manifest; returns the
    manifest path. Deterministic for a given spec."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    images, labels = make_shapes(spec)
    entries = []
    for i in range(images.shape[0]):
        name = f"{i:05d}.png"
        arr = np.round(images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / name)
        if kind == KIND_CLASSIFICATION:
            entries.append(DatasetEntry(image=f"images/{name}", label=int(labels[i])))
        else:
            entries.append(
                DatasetEntry(image=f"images/{name}", captions=[spec.caption(int(labels[i]))])
            )
    manifest = DatasetManifest(
        id=dataset_id or f"shapes{spec.num_classes}-{kind}-seed{spec.seed}",
        kind=kind,
        root=out_dir,
        entries=entries,
        class_names=spec.class_names if kind == KIND_CLASSIFICATION else None,
        prompt_template=prompt_template,
    )
    return manifest.save(out_dir / "manifest.json")
