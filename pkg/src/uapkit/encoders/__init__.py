"""Uniform adapter layer over heterogeneous dual encoders.

An EncoderHandle describes how to materialize a model (backend_locator
scheme decides which adapter class loads it); a SearchSpace is an ordered
pool of handles whose position doubles as the bandit arm index. Adapters
own preprocessing normalization; callers hand them [0,1]-space pixels at
the handle's input resolution.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from ..core import ImageBatch, UapkitError, ValidationError


class BackendLoadError(UapkitError):
    """The backend for a handle could not be materialized."""


@dataclass(frozen=True)
class EncoderHandle:
    id: str
    architecture_tag: str
    pretraining_tag: str
    backend_locator: str
    input_resolution: tuple[int, int]
    embed_dim: int

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("handle id must be non-empty")
        if self.embed_dim < 1:
            raise ValidationError("embed_dim must be >= 1")
        res = (int(self.input_resolution[0]), int(self.input_resolution[1]))
        if res[0] < 1 or res[1] < 1:
            raise ValidationError("input_resolution must be positive")
        object.__setattr__(self, "input_resolution", res)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "architecture_tag": self.architecture_tag,
            "pretraining_tag": self.pretraining_tag,
            "backend_locator": self.backend_locator,
            "input_resolution": list(self.input_resolution),
            "embed_dim": self.embed_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderHandle":
        return EncoderHandle(
            id=d["id"],
            architecture_tag=d["architecture_tag"],
            pretraining_tag=d["pretraining_tag"],
            backend_locator=d["backend_locator"],
            input_resolution=tuple(d["input_resolution"]),
            embed_dim=int(d["embed_dim"]),
        )


@dataclass(frozen=True)
class SearchSpace:
    name: str
    handles: tuple

    def __post_init__(self) -> None:
        handles = tuple(self.handles)
        object.__setattr__(self, "handles", handles)
        if len(handles) < 1:
            raise ValidationError("search space must contain at least one handle")
        ids = [h.id for h in handles]
        if len(set(ids)) != len(ids):
            raise ValidationError("handle ids must be unique within a search space")

    def __len__(self) -> int:
        return len(self.handles)

    @property
    def ids(self) -> list[str]:
        return [h.id for h in self.handles]

    def index_of(self, handle_id: str) -> int:
        for i, h in enumerate(self.handles):
            if h.id == handle_id:
                return i
        raise ValidationError(f"unknown handle id {handle_id!r}")

    def subset(self, ids, name: str | None = None) -> "SearchSpace":
        handles = tuple(self.handles[self.index_of(i)] for i in ids)
        return SearchSpace(name=name or self.name, handles=handles)

    def to_dict(self) -> dict:
        return {"name": self.name, "handles": [h.to_dict() for h in self.handles]}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @staticmethod
    def from_dict(d: dict) -> "SearchSpace":
        return SearchSpace(
            name=d["name"], handles=tuple(EncoderHandle.from_dict(h) for h in d["handles"])
        )

    @staticmethod
    def load(path: str | Path) -> "SearchSpace":
        return SearchSpace.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EmbeddingBatch:
    """[B, d] tensor with unit-norm rows (tolerance 1e-5)."""

    vectors: torch.Tensor

    def __post_init__(self) -> None:
        v = self.vectors
        if not isinstance(v, torch.Tensor) or v.dim() != 2 or v.shape[0] < 1:
            raise ValidationError("vectors must be a non-empty [B,d] tensor")
        with torch.no_grad():
            norms = torch.linalg.vector_norm(v.float(), dim=1)
            bad = (norms - 1.0).abs().max().item()
        if bad > 1e-5:
            raise ValidationError(f"rows must be unit-normalized (max deviation {bad:g})")

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


class EncoderAdapter:
    """Backend-agnostic inference interface.

    embed_pixels expects [B,3,h,w] pixels in [0,1] at the handle's input
    resolution and returns unit-normalized [B,d] embeddings. When
    track_gradients is set the forward participates in autograd back to
    the pixels and the adapter counts it (one tracked forward feeds
    exactly one backward through this encoder per step).
    """

    def __init__(self, handle: EncoderHandle):
        self.handle = handle
        self.grad_pass_count = 0
        self._lock = threading.Lock()

    def _embed_pixels_impl(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _embed_texts_impl(self, texts: list[str]) -> torch.Tensor:
        raise NotImplementedError

    def embed_pixels(self, pixels: torch.Tensor, track_gradients: bool = False) -> torch.Tensor:
        if pixels.dim() != 4 or pixels.shape[1] != 3:
            raise ValidationError("pixels must be [B,3,h,w]")
        if tuple(pixels.shape[2:]) != self.handle.input_resolution:
            raise ValidationError(
                f"{self.handle.id}: pixels at {tuple(pixels.shape[2:])}, "
                f"expected {self.handle.input_resolution}"
            )
        if track_gradients:
            with self._lock:
                self.grad_pass_count += 1
            return self._embed_pixels_impl(pixels)
        with torch.no_grad():
            return self._embed_pixels_impl(pixels)

    def embed_texts(self, texts) -> torch.Tensor:
        texts = list(texts)
        if not texts:
            raise ValidationError("texts must be non-empty")
        with torch.no_grad():
            return self._embed_texts_impl(texts)


_BACKENDS: dict[str, type] = {}
_ADAPTERS: dict[tuple[str, str], EncoderAdapter] = {}
_REGISTRY_LOCK = threading.Lock()


def register_backend(scheme: str, adapter_cls) -> None:
    _BACKENDS[scheme] = adapter_cls


def materialize(handle: EncoderHandle) -> EncoderAdapter:
    """Instantiate (or fetch the cached) adapter for a handle.

    Materialization is serialized; the returned adapter is shared, so
    inference must stay read-only.
    """
    key = (handle.id, handle.backend_locator)
    with _REGISTRY_LOCK:
        adapter = _ADAPTERS.get(key)
        if adapter is None:
            scheme = handle.backend_locator.split(":", 1)[0]
            cls = _BACKENDS.get(scheme)
            if cls is None:
                raise BackendLoadError(f"no backend registered for scheme {scheme!r}")
            adapter = cls(handle)
            _ADAPTERS[key] = adapter
    return adapter


def clear_adapter_cache() -> None:
    with _REGISTRY_LOCK:
        _ADAPTERS.clear()


def encode_image(handle: EncoderHandle, x: ImageBatch, track_gradients: bool = False) -> EmbeddingBatch:
    """Unit-normalized image embeddings; caller resizes to the handle's
    input resolution first."""
    adapter = materialize(handle)
    return EmbeddingBatch(adapter.embed_pixels(x.pixels, track_gradients=track_gradients))


def encode_text(handle: EncoderHandle, texts) -> EmbeddingBatch:
    adapter = materialize(handle)
    return EmbeddingBatch(adapter.embed_texts(texts))


def clip_contrastive_loss(image_emb, text_emb, temperature) -> torch.Tensor:
    """Symmetric InfoNCE over a batch of aligned image/text embeddings.

    -(1/2b) * [sum_j log softmax_j(row) + sum_k log softmax_k(col)] with
    logits = (z_img @ z_txt^T) / temperature. Returns a 0-dim tensor so the
    toy trainer can differentiate through it.
    """
    zi = image_emb.vectors if isinstance(image_emb, EmbeddingBatch) else image_emb
    zt = text_emb.vectors if isinstance(text_emb, EmbeddingBatch) else text_emb
    if zi.shape[0] != zt.shape[0]:
        raise ValidationError("image/text batch sizes differ")
    if zi.shape[1] != zt.shape[1]:
        raise ValidationError("embedding dims differ")
    tau = temperature if isinstance(temperature, torch.Tensor) else torch.as_tensor(temperature, dtype=zi.dtype)
    if float(tau) <= 0:
        raise ValidationError("temperature must be > 0")
    logits = zi @ zt.T / tau
    labels = torch.arange(zi.shape[0], device=zi.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def load_builtin_space(name: str) -> SearchSpace:
    """Built-in manifest by name: base, mid, or large."""
    path = Path(__file__).parent / "manifests" / f"{name.lower()}.json"
    if not path.exists():
        raise ValidationError(f"no builtin search space named {name!r}")
    return SearchSpace.load(path)


from . import toy as _toy  # noqa: E402  (registers the toy backends)
from . import openclip as _openclip  # noqa: E402  (registers open_clip scheme)
from .toy import ToyTrainConfig, train_toy_encoder  # noqa: E402

__all__ = [
    "BackendLoadError",
    "EncoderAdapter",
    "EncoderHandle",
    "EmbeddingBatch",
    "SearchSpace",
    "ToyTrainConfig",
    "clear_adapter_cache",
    "clip_contrastive_loss",
    "encode_image",
    "encode_text",
    "load_builtin_space",
    "materialize",
    "register_backend",
    "train_toy_encoder",
]
