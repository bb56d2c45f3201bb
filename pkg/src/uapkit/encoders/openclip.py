"""Lazy adapter for open_clip checkpoints.

Locator form: "open_clip:<model_name>:<pretrained_tag>". Weights are not
bundled; materialization needs the open_clip package plus its checkpoint
cache, and fails with BackendLoadError otherwise. Manifest-declared
embed_dim / input_resolution are hints, the loaded model wins.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from . import BackendLoadError, EncoderAdapter, EncoderHandle, register_backend

_FALLBACK_MEAN = (0.48145466, 0.4578275, 0.40821073)
_FALLBACK_STD = (0.26862954, 0.26130258, 0.27577711)


class OpenClipAdapter(EncoderAdapter):
    def __init__(self, handle: EncoderHandle):
        parts = handle.backend_locator.split(":")
        if len(parts) != 3:
            raise BackendLoadError(
                f"bad open_clip locator {handle.backend_locator!r}, "
                "expected open_clip:<model>:<pretrained>"
            )
        _, model_name, pretrained = parts
        try:
            import open_clip
        except ImportError as exc:
            raise BackendLoadError(
                f"open_clip is not installed; cannot materialize {handle.id!r}"
            ) from exc
        try:
            model, _, _ = open_clip.create_model_and_transforms(
                model_name, pretrained=pretrained
            )
            tokenizer = open_clip.get_tokenizer(model_name)
        except Exception as exc:
            raise BackendLoadError(
                f"open_clip could not load ({model_name}, {pretrained}): {exc}"
            ) from exc
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        image_size = getattr(model.visual, "image_size", handle.input_resolution)
        if isinstance(image_size, int):
            image_size = (image_size, image_size)
        mean = getattr(model.visual, "image_mean", None) or _FALLBACK_MEAN
        std = getattr(model.visual, "image_std", None) or _FALLBACK_STD
        super().__init__(
            EncoderHandle(
                id=handle.id,
                architecture_tag=handle.architecture_tag,
                pretraining_tag=handle.pretraining_tag,
                backend_locator=handle.backend_locator,
                input_resolution=tuple(int(v) for v in image_size),
                embed_dim=handle.embed_dim,
            )
        )
        self.module = model
        self.tokenizer = tokenizer
        self.register_stats = (
            torch.tensor(mean).view(3, 1, 1),
            torch.tensor(std).view(3, 1, 1),
        )

    def _embed_pixels_impl(self, pixels: torch.Tensor) -> torch.Tensor:
        mean, std = self.register_stats
        feats = self.module.encode_image((pixels - mean.to(pixels.dtype)) / std.to(pixels.dtype))
        return F.normalize(feats, dim=-1)

    def _embed_texts_impl(self, texts: list[str]) -> torch.Tensor:
        tokens = self.tokenizer(texts)
        return F.normalize(self.module.encode_text(tokens), dim=-1)


register_backend("open_clip", OpenClipAdapter)
