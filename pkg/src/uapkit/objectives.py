"""Adversarial loss terms: similarity objectives, ensemble mean, regularizers.

Both attack modes are minimized. The non-targeted objective is the mean
cosine similarity between adversarial and clean embeddings (drive it
down); the targeted objective is the negated mean similarity to the
target text embedding (driving it down raises the target similarity).
The bandit reward is exactly the per-encoder value of this canonical
minimized loss, so a high reward always marks a hard-to-fool encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .core import ImageBatch, Kind, KindMismatchError, Perturbation, ValidationError
from .encoders import EmbeddingBatch, EncoderAdapter, EncoderHandle, materialize


@dataclass
class LossBreakdown:
    total: float
    adv_term: float
    reg_terms: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        expect = self.adv_term + math.fsum(self.reg_terms.values())
        scale = max(abs(expect), 1.0)
        if abs(self.total - expect) > 1e-9 * scale:
            raise ValidationError("total != adv_term + sum(reg_terms)")

    @classmethod
    def build(cls, adv_term: float, reg_terms: dict | None = None) -> "LossBreakdown":
        regs = {k: float(v) for k, v in (reg_terms or {}).items()}
        return cls(total=float(adv_term) + math.fsum(regs.values()), adv_term=float(adv_term), reg_terms=regs)


def cosine_similarity(a, b) -> torch.Tensor:
    """Rowwise dot products of unit vectors, shape [B], values in [-1, 1]."""
    va = a.vectors if isinstance(a, EmbeddingBatch) else a
    vb = b.vectors if isinstance(b, EmbeddingBatch) else b
    if va.shape != vb.shape:
        raise ValidationError(f"embedding shapes differ: {tuple(va.shape)} vs {tuple(vb.shape)}")
    return (va * vb).sum(dim=-1)


def similarity_loss(adapter: EncoderAdapter, x_pixels: torch.Tensor, x_adv_pixels: torch.Tensor) -> torch.Tensor:
    """Per-encoder non-targeted term on raw pixel tensors (the engine path;
    x_adv may sit outside [0,1] because optimization does not clamp)."""
    clean = adapter.embed_pixels(x_pixels, track_gradients=False)
    adv = adapter.embed_pixels(x_adv_pixels, track_gradients=bool(x_adv_pixels.requires_grad))
    return (adv * clean.detach()).sum(dim=-1).mean()


def target_loss(adapter: EncoderAdapter, x_adv_pixels: torch.Tensor, target_emb: torch.Tensor) -> torch.Tensor:
    """Per-encoder targeted term: negated mean similarity to the target."""
    adv = adapter.embed_pixels(x_adv_pixels, track_gradients=bool(x_adv_pixels.requires_grad))
    return -(adv * target_emb.detach()).sum(dim=-1).mean()


def non_targeted_loss(handle: EncoderHandle, x: ImageBatch, x_adv: ImageBatch) -> torch.Tensor:
    """Mean over the batch of sim(f_I(x_adv), f_I(x)); 0-dim tensor."""
    if x.pixels.shape != x_adv.pixels.shape:
        raise ValidationError("x and x_adv batches must be aligned")
    return similarity_loss(materialize(handle), x.pixels, x_adv.pixels)


def targeted_loss(handle: EncoderHandle, x_adv: ImageBatch, target_text: str) -> torch.Tensor:
    """-mean(sim(f_I(x_adv), f_T(target_text))); report -loss as the target
    similarity."""
    if not target_text:
        raise ValidationError("target_text must be non-empty")
    adapter = materialize(handle)
    temb = adapter.embed_texts([target_text])[0]
    return target_loss(adapter, x_adv.pixels, temb.to(x_adv.pixels.dtype))


def ensemble_loss(per_encoder_losses):
    """Arithmetic mean. Tensor inputs give a differentiable 0-dim tensor,
    plain reals give a float."""
    values = list(per_encoder_losses)
    if not values:
        raise ValidationError("ensemble_loss needs at least one value")
    if isinstance(values[0], torch.Tensor):
        return torch.stack(values).mean()
    return math.fsum(float(v) for v in values) / len(values)


def total_variation(t: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: sum of absolute forward differences along the last
    two dims, no wraparound."""
    if t.dim() < 2:
        raise ValidationError("total_variation expects at least 2 dims")
    dh = (t[..., 1:, :] - t[..., :-1, :]).abs().sum()
    dw = (t[..., :, 1:] - t[..., :, :-1]).abs().sum()
    return dh + dw


def patch_reg_tensors(mask_logits: torch.Tensor, pattern_logits: torch.Tensor, alpha: float, beta: float) -> dict:
    """Differentiable regularizer terms on the sigmoid-mapped mask/pattern."""
    m = torch.sigmoid(mask_logits)
    pattern = torch.sigmoid(pattern_logits)
    return {
        "l1_mask": alpha * m.abs().sum(),
        "tv_mask": beta * total_variation(m),
        "tv_pattern": beta * total_variation(pattern),
    }


def patch_regularizers(p: Perturbation, alpha: float | None = None, beta: float | None = None) -> LossBreakdown:
    """alpha*||m||_1 + beta*(TV(m) + TV(pattern)) as a reg-only breakdown."""
    if p.threat_model.kind is not Kind.PATCH:
        raise KindMismatchError("patch_regularizers requires a PATCH perturbation")
    alpha = p.threat_model.alpha if alpha is None else alpha
    beta = p.threat_model.beta if beta is None else beta
    terms = patch_reg_tensors(p.mask_logits, p.pattern_logits, alpha, beta)
    return LossBreakdown.build(0.0, {k: float(v) for k, v in terms.items()})


def l2_reg_tensor(delta: torch.Tensor, c: float) -> torch.Tensor:
    return c * torch.linalg.vector_norm(delta)


def l2_regularizer(p: Perturbation, c: float | None = None) -> float:
    """c * ||delta||_2 over all elements."""
    if p.threat_model.kind is not Kind.L2:
        raise KindMismatchError("l2_regularizer requires an L2 perturbation")
    c = p.threat_model.c if c is None else c
    return float(l2_reg_tensor(p.delta, c))
