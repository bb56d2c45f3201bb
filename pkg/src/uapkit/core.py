"""Shared domain types plus perturbation application and resizing ops.

Perturbations live in raw pixel space ([0, 1] images); model-specific
normalization belongs to the encoder adapters. Adversarial images are
clamped to the valid pixel box only here, at application time; the
optimization loop works on the unclamped sum.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn.functional as F

GENERATOR_VERSION = "0.1.0"


class UapkitError(Exception):
    """Base class for package errors."""


class ValidationError(UapkitError):
    """Domain value violates a documented invariant or precondition."""


class KindMismatchError(ValidationError):
    pass


class ResolutionMismatchError(ValidationError):
    pass


class Kind(str, Enum):
    LINF = "linf"
    L2 = "l2"
    PATCH = "patch"


class Task(str, Enum):
    ZERO_SHOT = "zero_shot"
    TEXT_RETRIEVAL = "text_retrieval"
    IMAGE_RETRIEVAL = "image_retrieval"
    TARGETED_ZS = "targeted_zs"
    TARGETED_IR_RANK = "targeted_ir_rank"


@dataclass(frozen=True)
class ThreatModel:
    """Constraint family for a perturbation.

    Exactly the parameters of the active kind are set: epsilon for LINF,
    c for L2, (alpha, beta) for PATCH.
    """

    kind: Kind
    epsilon: float | None = None
    c: float | None = None
    alpha: float | None = None
    beta: float | None = None

    def __post_init__(self) -> None:
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        active = {
            Kind.LINF: ("epsilon",),
            Kind.L2: ("c",),
            Kind.PATCH: ("alpha", "beta"),
        }[kind]
        for name in ("epsilon", "c", "alpha", "beta"):
            value = getattr(self, name)
            if name in active:
                if value is None:
                    raise ValidationError(f"{kind.value} threat model requires {name}")
            elif value is not None:
                raise ValidationError(f"{name} is not a parameter of kind {kind.value}")
        if kind is Kind.LINF and not self.epsilon > 0:
            raise ValidationError("epsilon must be > 0")
        if kind is Kind.L2 and self.c < 0:
            raise ValidationError("c must be >= 0")
        if kind is Kind.PATCH and (self.alpha < 0 or self.beta < 0):
            raise ValidationError("alpha and beta must be >= 0")

    @staticmethod
    def linf(epsilon: float = 12 / 255) -> "ThreatModel":
        return ThreatModel(kind=Kind.LINF, epsilon=epsilon)

    @staticmethod
    def l2(c: float = 0.025) -> "ThreatModel":
        return ThreatModel(kind=Kind.L2, c=c)

    @staticmethod
    def patch(alpha: float = 3e-5, beta: float = 70.0) -> "ThreatModel":
        return ThreatModel(kind=Kind.PATCH, alpha=alpha, beta=beta)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        for name in ("epsilon", "c", "alpha", "beta"):
            value = getattr(self, name)
            if value is not None:
                out[name] = float(value)
        return out

    @staticmethod
    def from_dict(d: dict) -> "ThreatModel":
        return ThreatModel(
            kind=Kind(d["kind"]),
            epsilon=d.get("epsilon"),
            c=d.get("c"),
            alpha=d.get("alpha"),
            beta=d.get("beta"),
        )


@dataclass
class ImageBatch:
    """Batch of images, shape [B, 3, H, W], values in [0, 1]."""

    pixels: torch.Tensor

    def __post_init__(self) -> None:
        t = self.pixels
        if not isinstance(t, torch.Tensor) or t.dim() != 4 or t.shape[1] != 3:
            raise ValidationError("pixels must be a [B,3,H,W] tensor")
        if t.shape[0] < 1:
            raise ValidationError("batch must be non-empty")
        with torch.no_grad():
            lo, hi = t.min().item(), t.max().item()
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValidationError("pixels must be finite")
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"pixels outside [0,1]: min={lo}, max={hi}")

    @property
    def resolution(self) -> tuple[int, int]:
        return (int(self.pixels.shape[2]), int(self.pixels.shape[3]))

    def __len__(self) -> int:
        return int(self.pixels.shape[0])


@dataclass
class PerturbationMeta:
    """Provenance record. `created` stays None unless a caller stamps it,
    so identical generations serialize to identical bytes."""

    generator_version: str = GENERATOR_VERSION
    config_digest: str | None = None
    created: str | None = None

    def to_dict(self) -> dict:
        return {
            "generator_version": self.generator_version,
            "config_digest": self.config_digest,
            "created": self.created,
        }

    @staticmethod
    def from_dict(d: dict) -> "PerturbationMeta":
        return PerturbationMeta(
            generator_version=d.get("generator_version", GENERATOR_VERSION),
            config_digest=d.get("config_digest"),
            created=d.get("created"),
        )


def linf_bound_ok(delta: torch.Tensor, epsilon: float) -> bool:
    # Comparison happens at the tensor's own precision: clamp(-eps, eps) in
    # float32 produces values equal to float32(eps), which exceed the python
    # float only when compared at the wrong width.
    bound = torch.as_tensor(epsilon, dtype=delta.dtype)
    return bool((delta.abs().max() <= bound).item())


@dataclass
class Perturbation:
    """A universal perturbation under one threat model.

    LINF/L2 carry `delta` [3,H,W]; PATCH carries `mask_logits` [H,W] and
    `pattern_logits` [3,H,W] (sigmoid-mapped at application, so the [0,1]
    box holds by construction). Callable: p(images) applies it.
    """

    threat_model: ThreatModel
    resolution: tuple[int, int]
    delta: torch.Tensor | None = None
    mask_logits: torch.Tensor | None = None
    pattern_logits: torch.Tensor | None = None
    targeted: bool = False
    target_text: str | None = None
    meta: PerturbationMeta = field(default_factory=PerturbationMeta)

    def __post_init__(self) -> None:
        h, w = self.resolution
        if h < 1 or w < 1:
            raise ValidationError("resolution must be positive")
        self.resolution = (int(h), int(w))
        kind = self.threat_model.kind
        if kind in (Kind.LINF, Kind.L2):
            if self.delta is None:
                raise ValidationError(f"{kind.value} perturbation requires delta")
            if self.mask_logits is not None or self.pattern_logits is not None:
                raise ValidationError("mask/pattern logits are PATCH-only fields")
            if tuple(self.delta.shape) != (3, h, w):
                raise ValidationError(
                    f"delta shape {tuple(self.delta.shape)} != (3, {h}, {w})"
                )
            if not bool(torch.isfinite(self.delta).all().item()):
                raise ValidationError("delta must be finite")
            if kind is Kind.LINF and not linf_bound_ok(self.delta, self.threat_model.epsilon):
                raise ValidationError("delta exceeds the declared epsilon bound")
        else:
            if self.delta is not None:
                raise ValidationError("delta is an additive-kind field")
            if self.mask_logits is None or self.pattern_logits is None:
                raise ValidationError("patch perturbation requires mask and pattern logits")
            if tuple(self.mask_logits.shape) != (h, w):
                raise ValidationError("mask_logits must have shape (H, W)")
            if tuple(self.pattern_logits.shape) != (3, h, w):
                raise ValidationError("pattern_logits must have shape (3, H, W)")
            finite = torch.isfinite(self.mask_logits).all() & torch.isfinite(self.pattern_logits).all()
            if not bool(finite.item()):
                raise ValidationError("patch logits must be finite")
        if self.targeted and not self.target_text:
            raise ValidationError("targeted perturbation requires target_text")

    def tensors(self) -> dict[str, torch.Tensor]:
        if self.threat_model.kind is Kind.PATCH:
            return {"mask_logits": self.mask_logits, "pattern_logits": self.pattern_logits}
        return {"delta": self.delta}

    def __call__(self, x: ImageBatch) -> ImageBatch:
        return apply(x, self)


@dataclass
class EvalReport:
    """One (task, dataset, victim) evaluation row."""

    task: Task
    dataset_id: str
    victim_id: str
    metric_name: str
    s_clean: float
    s_adv: float
    asr: float
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.task = Task(self.task)
        if self.s_clean > 0:
            expect = 100.0 * (self.s_clean - self.s_adv) / self.s_clean
            scale = max(abs(expect), 1.0)
            if abs(self.asr - expect) > 1e-9 * scale:
                raise ValidationError("asr inconsistent with (s_clean, s_adv)")

    @classmethod
    def from_scores(
        cls,
        task: Task,
        dataset_id: str,
        victim_id: str,
        metric_name: str,
        s_clean: float,
        s_adv: float,
        extras: dict | None = None,
    ) -> "EvalReport":
        return cls(
            task=task,
            dataset_id=dataset_id,
            victim_id=victim_id,
            metric_name=metric_name,
            s_clean=float(s_clean),
            s_adv=float(s_adv),
            asr=asr_percent(s_clean, s_adv),
            extras=extras or {},
        )

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "dataset_id": self.dataset_id,
            "victim_id": self.victim_id,
            "metric_name": self.metric_name,
            "s_clean": self.s_clean,
            "s_adv": self.s_adv,
            "asr": self.asr,
            "extras": dict(self.extras),
        }


def asr_percent(s_clean: float, s_adv: float) -> float:
    """100 * (s_clean - s_adv) / s_clean; NaN sentinel when s_clean == 0."""
    if s_clean == 0:
        return math.nan
    return 100.0 * (s_clean - s_adv) / s_clean


def _pixels_of(x) -> torch.Tensor:
    return x.pixels if isinstance(x, ImageBatch) else x


def _check_resolution(pixels: torch.Tensor, p: Perturbation) -> None:
    resolution = tuple(pixels.shape[2:])
    if resolution != p.resolution:
        raise ResolutionMismatchError(
            f"image resolution {resolution} != perturbation resolution {p.resolution}"
        )


def _like(x, pixels: torch.Tensor):
    return ImageBatch(pixels) if isinstance(x, ImageBatch) else pixels


def apply_linf(x, p: Perturbation):
    """x' = clamp(x + delta, 0, 1), delta broadcast over the batch."""
    if p.threat_model.kind is not Kind.LINF:
        raise KindMismatchError(f"apply_linf called with kind {p.threat_model.kind.value}")
    px = _pixels_of(x)
    _check_resolution(px, p)
    return _like(x, torch.clamp(px + p.delta.to(px.dtype), 0.0, 1.0))


def apply_l2(x, p: Perturbation):
    """Additive application for the L2-penalized kind (same form as LINF)."""
    if p.threat_model.kind is not Kind.L2:
        raise KindMismatchError(f"apply_l2 called with kind {p.threat_model.kind.value}")
    px = _pixels_of(x)
    _check_resolution(px, p)
    return _like(x, torch.clamp(px + p.delta.to(px.dtype), 0.0, 1.0))


def apply_patch(x, p: Perturbation):
    """x' = m * pattern + (1 - m) * x with m = sigmoid(mask_logits)."""
    if p.threat_model.kind is not Kind.PATCH:
        raise KindMismatchError(f"apply_patch called with kind {p.threat_model.kind.value}")
    px = _pixels_of(x)
    _check_resolution(px, p)
    m = torch.sigmoid(p.mask_logits.to(px.dtype))
    pattern = torch.sigmoid(p.pattern_logits.to(px.dtype))
    out = m * pattern + (1.0 - m) * px
    # convex combination of in-range values; clamp only absorbs rounding
    return _like(x, torch.clamp(out, 0.0, 1.0))


_APPLY = {Kind.LINF: apply_linf, Kind.L2: apply_l2, Kind.PATCH: apply_patch}


def apply(x, p: Perturbation):
    """Perturb a batch; accepts an ImageBatch or a raw [B,3,H,W] tensor and
    returns the same container it was given."""
    return _APPLY[p.threat_model.kind](x, p)


def _resize_chw(t: torch.Tensor, resolution: tuple[int, int]) -> torch.Tensor:
    # corner-aligned bilinear; rank-3 in, rank-3 out
    return F.interpolate(
        t.unsqueeze(0), size=resolution, mode="bilinear", align_corners=True
    ).squeeze(0)


def rescale_perturbation(p: Perturbation, new_resolution: tuple[int, int]) -> Perturbation:
    """Bilinear resize of all perturbation tensors to (h, w).

    The LINF bound is re-projected after interpolation so the declared
    epsilon invariant survives. Same-resolution calls return an exact copy.
    """
    h, w = int(new_resolution[0]), int(new_resolution[1])
    if h < 1 or w < 1:
        raise ValidationError("target resolution must be positive")
    if (h, w) == p.resolution:
        tensors = {k: v.clone() for k, v in p.tensors().items()}
        return dataclasses.replace(p, **tensors)
    if p.threat_model.kind is Kind.PATCH:
        mask = _resize_chw(p.mask_logits.unsqueeze(0), (h, w)).squeeze(0)
        pattern = _resize_chw(p.pattern_logits, (h, w))
        return dataclasses.replace(
            p, resolution=(h, w), mask_logits=mask, pattern_logits=pattern
        )
    delta = _resize_chw(p.delta, (h, w))
    if p.threat_model.kind is Kind.LINF:
        eps = torch.as_tensor(p.threat_model.epsilon, dtype=delta.dtype)
        delta = torch.clamp(delta, -eps, eps)
    return dataclasses.replace(p, resolution=(h, w), delta=delta)
