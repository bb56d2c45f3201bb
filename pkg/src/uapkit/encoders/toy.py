"""Self-contained toy dual encoder and its contrastive trainer.

A few-conv-layer image tower and an embedding-table/MLP text tower,
trained with the symmetric InfoNCE loss on the procedural shapes data.
Small enough that a pool of them trains in CPU seconds, which is what the
desk-scale transfer experiments need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import UapkitError, ValidationError
from ..shapes import COLOR_RGB, SHAPE_NAMES, ShapesSpec, make_shapes
from . import (
    BackendLoadError,
    EncoderAdapter,
    EncoderHandle,
    clip_contrastive_loss,
    register_backend,
)


class ToyTrainingDivergedError(UapkitError):
    """Training loss became non-finite."""


_COMMON_WORDS = ("a", "an", "the", "of", "photo", "image", "picture")


def build_vocab() -> list[str]:
    words = set(_COMMON_WORDS) | set(COLOR_RGB) | set(SHAPE_NAMES)
    return ["<pad>", "<unk>"] + sorted(words)


class ToyDualEncoder(nn.Module):
    def __init__(
        self,
        vocab: list[str],
        embed_dim: int = 32,
        width: int = 32,
        resolution: int = 32,
        temperature: float = 0.07,
        trainable_temperature: bool = False,
    ):
        super().__init__()
        self.vocab = list(vocab)
        self.word_to_id = {w: i for i, w in enumerate(self.vocab)}
        self.embed_dim = embed_dim
        self.width = width
        self.resolution = resolution
        self.image_tower = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.image_proj = nn.Linear(4 * width, embed_dim)
        self.token_embedding = nn.Embedding(len(self.vocab), 2 * width)
        self.text_mlp = nn.Sequential(
            nn.Linear(2 * width, 2 * width),
            nn.GELU(),
            nn.Linear(2 * width, embed_dim),
        )
        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(temperature)), requires_grad=trainable_temperature
        )

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def tokenize(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        unk = self.word_to_id["<unk>"]
        seqs = [[self.word_to_id.get(w, unk) for w in t.lower().split()] for t in texts]
        longest = max((len(s) for s in seqs), default=1) or 1
        ids = torch.zeros(len(seqs), longest, dtype=torch.long)
        mask = torch.zeros(len(seqs), longest)
        for i, s in enumerate(seqs):
            if s:
                ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
                mask[i, : len(s)] = 1.0
        return ids, mask

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        feats = self.image_tower(pixels).mean(dim=(2, 3))
        return F.normalize(self.image_proj(feats), dim=-1)

    def encode_text(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        emb = self.token_embedding(ids)
        mask = mask.to(emb.dtype).unsqueeze(-1)
        pooled = (emb * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        return F.normalize(self.text_mlp(pooled), dim=-1)

    def encode_texts(self, texts: list[str]) -> torch.Tensor:
        ids, mask = self.tokenize(texts)
        param = next(self.parameters())
        return self.encode_text(ids, mask.to(param.dtype))


@dataclass(frozen=True)
class ToyTrainConfig:
    dataset: ShapesSpec = field(default_factory=ShapesSpec)
    temperature: float = 0.07
    trainable_temperature: bool = False
    batch_size: int = 64
    epochs: int = 4
    learning_rate: float = 3e-3
    embed_dim: int = 32
    width: int = 32

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size >= 1 and epochs >= 0 required")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "temperature": self.temperature,
            "trainable_temperature": self.trainable_temperature,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "embed_dim": self.embed_dim,
            "width": self.width,
        }

    @staticmethod
    def from_dict(d: dict) -> "ToyTrainConfig":
        d = dict(d)
        if "dataset" in d:
            d["dataset"] = ShapesSpec.from_dict(d["dataset"])
        return ToyTrainConfig(**d)


# in-memory model store for handles that never touch disk
_MEM_MODELS: dict[str, ToyDualEncoder] = {}
_MEM_COUNTER = 0


class ToyAdapter(EncoderAdapter):
    def __init__(self, handle: EncoderHandle, module: ToyDualEncoder):
        super().__init__(handle)
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self.module = module

    def _dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    def _embed_pixels_impl(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.module.encode_image(pixels.to(self._dtype()))

    def _embed_texts_impl(self, texts: list[str]) -> torch.Tensor:
        return self.module.encode_texts(texts)


class ToyMemAdapter(ToyAdapter):
    def __init__(self, handle: EncoderHandle):
        token = handle.backend_locator.split(":", 1)[1]
        module = _MEM_MODELS.get(token)
        if module is None:
            raise BackendLoadError(f"no in-memory toy model under token {token!r}")
        super().__init__(handle, module)


class ToyFileAdapter(ToyAdapter):
    def __init__(self, handle: EncoderHandle):
        path = Path(handle.backend_locator.split(":", 1)[1])
        if not path.exists():
            raise BackendLoadError(f"toy weights file missing: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
            module = ToyDualEncoder(vocab=payload["vocab"], **payload["model_config"])
            module.load_state_dict(payload["state_dict"])
        except BackendLoadError:
            raise
        except Exception as exc:
            raise BackendLoadError(f"cannot load toy weights from {path}: {exc}") from exc
        super().__init__(handle, module)


register_backend("toymem", ToyMemAdapter)
register_backend("toy", ToyFileAdapter)


def save_toy_model(model: ToyDualEncoder, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": 1,
            "vocab": model.vocab,
            "model_config": {
                "embed_dim": model.embed_dim,
                "width": model.width,
                "resolution": model.resolution,
                "temperature": float(model.temperature.detach()),
                "trainable_temperature": bool(model.log_temperature.requires_grad),
            },
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def register_toy_model(model: ToyDualEncoder, handle_id: str) -> EncoderHandle:
    global _MEM_COUNTER
    _MEM_COUNTER += 1
    token = f"{handle_id}-{_MEM_COUNTER}"
    _MEM_MODELS[token] = model
    return EncoderHandle(
        id=handle_id,
        architecture_tag="toy-conv-gelu",
        pretraining_tag="captioned-shapes",
        backend_locator=f"toymem:{token}",
        input_resolution=(model.resolution, model.resolution),
        embed_dim=model.embed_dim,
    )


def train_toy_encoder(
    config: ToyTrainConfig,
    seed: int,
    save_path: str | Path | None = None,
    handle_id: str | None = None,
) -> EncoderHandle:
    """Train one toy dual encoder; reproducible for a given (config, seed).

    With save_path the weights land on disk and the handle points at the
    file; otherwise the model stays in the process-local store.
    """
    spec = config.dataset
    images, labels = make_shapes(spec)
    x_all = torch.from_numpy(images)
    y_all = torch.from_numpy(labels)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ToyDualEncoder(
            vocab=build_vocab(),
            embed_dim=config.embed_dim,
            width=config.width,
            resolution=spec.resolution,
            temperature=config.temperature,
            trainable_temperature=config.trainable_temperature,
        )
    class_ids, class_mask = model.tokenize([spec.caption(c) for c in range(spec.num_classes)])
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    g = torch.Generator().manual_seed(seed)
    n = x_all.shape[0]
    model.train()
    for _epoch in range(config.epochs):
        perm = torch.randperm(n, generator=g)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            zi = model.encode_image(x_all[idx])
            zt = model.encode_text(class_ids[y_all[idx]], class_mask[y_all[idx]])
            loss = clip_contrastive_loss(zi, zt, model.temperature)
            if not torch.isfinite(loss):
                raise ToyTrainingDivergedError(
                    f"non-finite training loss at epoch {_epoch} (seed {seed})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    hid = handle_id or f"toy_s{seed}"
    if save_path is not None:
        path = save_toy_model(model, save_path)
        return EncoderHandle(
            id=hid,
            architecture_tag="toy-conv-gelu",
            pretraining_tag="captioned-shapes",
            backend_locator=f"toy:{path.resolve()}",
            input_resolution=(spec.resolution, spec.resolution),
            embed_dim=config.embed_dim,
        )
    return register_toy_model(model, hid)
