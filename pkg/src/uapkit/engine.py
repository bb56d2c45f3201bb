"""The attack optimization loop.

Per step: sample a batch, form the adversarial batch under the threat
model, pick k surrogate arms, compute per-encoder losses, update the
bandit's EMA rewards, average the losses (plus regularizers for L2 and
PATCH), take a first-order step, and project. LINF uses the sign step
with box projection; L2 and PATCH use Adam on the unconstrained
parameters. Exactly k encoders are differentiated through per step.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import objectives
from .bandit import BanditState, SelectionStrategy, StrategyKind, select, update_rewards
from .core import (
    Kind,
    Perturbation,
    PerturbationMeta,
    ThreatModel,
    UapkitError,
    ValidationError,
)
from .data import DatasetManifest, load_images
from .encoders import SearchSpace, materialize

log = logging.getLogger("uapkit.engine")

CHECKPOINT_VERSION = 1


class AttackDivergedError(UapkitError):
    """Loss became non-finite; carries the trace accumulated so far."""

    def __init__(self, message: str, trace: "AttackTrace | None" = None):
        super().__init__(message)
        self.trace = trace


class CheckpointError(UapkitError):
    """Checkpoint missing, corrupt, or belonging to a different config."""


@dataclass
class AttackConfig:
    search_space: SearchSpace
    surrogate_dataset: DatasetManifest | str | Path
    threat_model: ThreatModel
    strategy: SelectionStrategy = field(default_factory=SelectionStrategy.ucb)
    k: int = 4
    targeted: bool = False
    target_text: str | None = None
    total_steps: int | None = None
    epochs: int = 1
    batch_size: int = 64
    step_size: float = 0.5 / 255
    learning_rate: float = 0.05
    reward_momentum: float = 0.1
    seed: int = 0
    resolution: tuple[int, int] = (224, 224)
    checkpoint_every: int = 0
    checkpoint_dir: str | Path | None = None
    log_every: int = 50

    def __post_init__(self) -> None:
        n = len(self.search_space)
        if not (1 <= self.k <= n):
            raise ValidationError(f"k must be in [1, {n}], got {self.k}")
        if self.strategy.kind is StrategyKind.FIXED_ALL and self.k != n:
            raise ValidationError("fixed_all requires k = N")
        if self.strategy.kind is StrategyKind.FIXED_SET:
            for aid in self.strategy.fixed_ids:
                self.search_space.index_of(aid)
            if len(self.strategy.fixed_ids) != self.k:
                raise ValidationError("fixed_set requires k = len(fixed_ids)")
        if self.targeted != bool(self.target_text):
            raise ValidationError("targeted runs require target_text (and only they may set it)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.total_steps is None and self.epochs < 1:
            raise ValidationError("epochs must be >= 1 when total_steps is unset")
        if self.total_steps is not None and self.total_steps < 0:
            raise ValidationError("total_steps must be >= 0")
        if self.threat_model.kind is Kind.LINF:
            if self.step_size <= 0:
                raise ValidationError("step_size must be > 0 for LINF")
        elif self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        h, w = self.resolution
        if h < 1 or w < 1:
            raise ValidationError("resolution must be positive")
        self.resolution = (int(h), int(w))
        if self.checkpoint_every < 0:
            raise ValidationError("checkpoint_every must be >= 0")
        if self.checkpoint_every > 0 and self.checkpoint_dir is None:
            raise ValidationError("checkpoint_every > 0 requires checkpoint_dir")

    def identity_dict(self) -> dict:
        """Fields that define the run's identity (run-length knobs excluded,
        so a checkpoint can be resumed with a larger step budget)."""
        dataset = self.surrogate_dataset
        dataset_ref = dataset.id if isinstance(dataset, DatasetManifest) else str(dataset)
        return {
            "search_space": self.search_space.to_dict(),
            "surrogate_dataset": dataset_ref,
            "threat_model": self.threat_model.to_dict(),
            "strategy": self.strategy.to_dict(),
            "k": self.k,
            "targeted": self.targeted,
            "target_text": self.target_text,
            "batch_size": self.batch_size,
            "step_size": self.step_size,
            "learning_rate": self.learning_rate,
            "reward_momentum": self.reward_momentum,
            "seed": self.seed,
            "resolution": list(self.resolution),
        }


def config_digest(config: AttackConfig) -> str:
    blob = json.dumps(config.identity_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class StepRecord:
    step: int
    chosen: list[str]
    losses: dict[str, float]
    ensemble_loss: float
    reg_terms: dict[str, float]
    total_loss: float
    grad_passes: int
    wall_time: float
    max_abs_delta: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "StepRecord":
        return StepRecord(**d)


@dataclass
class AttackTrace:
    records: list[StepRecord]
    final_state: BanditState
    config_digest: str

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        return path

    @staticmethod
    def read_jsonl(path: str | Path) -> list[StepRecord]:
        records = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    records.append(StepRecord.from_dict(json.loads(line)))
        return records

    def arm_histogram(self) -> dict[str, int]:
        hist: dict[str, int] = {}
        for r in self.records:
            for aid in r.chosen:
                hist[aid] = hist.get(aid, 0) + 1
        return hist


def _derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> torch.Tensor:
    """Indices for one step under epoch semantics: a fresh permutation per
    epoch (derived from seed and epoch only), consumed in batch_size slices.
    Pure function of its arguments, which is what makes resume exact."""
    steps_per_epoch = math.ceil(n / batch_size)
    epoch, pos = divmod(step, steps_per_epoch)
    g = torch.Generator().manual_seed(_derive_seed(seed, f"epoch{epoch}"))
    perm = torch.randperm(n, generator=g)
    return perm[pos * batch_size : pos * batch_size + batch_size]


def initial_tensors(config: AttackConfig) -> dict[str, torch.Tensor]:
    """Leaf parameters at step 0; deterministic in config.seed."""
    h, w = config.resolution
    kind = config.threat_model.kind
    g = torch.Generator().manual_seed(_derive_seed(config.seed, "init"))
    if kind is Kind.LINF:
        eps = config.threat_model.epsilon
        delta = (torch.rand((3, h, w), generator=g) * 2.0 - 1.0) * eps
        return {"delta": delta}
    if kind is Kind.L2:
        return {"delta": torch.randn((3, h, w), generator=g) * 1e-3}
    return {
        "mask_logits": torch.full((h, w), -2.0),
        "pattern_logits": torch.zeros((3, h, w)),
    }


def _resize_batch(x: torch.Tensor, resolution: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[2:]) == tuple(resolution):
        return x
    return torch.nn.functional.interpolate(
        x, size=tuple(resolution), mode="bilinear", align_corners=True
    )


def _build_perturbation(config: AttackConfig, params: dict, digest: str) -> Perturbation:
    meta = PerturbationMeta(config_digest=digest)
    tensors = {k: v.detach().clone().float() for k, v in params.items()}
    return Perturbation(
        threat_model=config.threat_model,
        resolution=config.resolution,
        targeted=config.targeted,
        target_text=config.target_text,
        meta=meta,
        **tensors,
    )


def save_checkpoint(
    path: str | Path,
    digest: str,
    step: int,
    params: dict,
    optimizer: torch.optim.Optimizer | None,
    state: BanditState,
    rng: np.random.Generator,
    records: list[StepRecord],
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_digest": digest,
        "step": step,
        "tensors": {k: v.detach().clone() for k, v in params.items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "bandit": state.to_dict(),
        "rng_state": rng.bit_generator.state,
        "records": [r.to_dict() for r in records],
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expected_digest: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file missing: {path}")
    try:
        # trusted local artifact written by save_checkpoint
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('format_version')} != {CHECKPOINT_VERSION}"
        )
    if payload.get("config_digest") != expected_digest:
        raise CheckpointError("checkpoint belongs to a different config (digest mismatch)")
    return payload


def run_attack(
    config: AttackConfig, resume_from: str | Path | None = None
) -> tuple[Perturbation, AttackTrace]:
    """Run (or resume) one optimization job; returns the final perturbation
    and the per-step trace. Deterministic for a given (config, seed)."""
    manifest = config.surrogate_dataset
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    space = config.search_space
    digest = config_digest(config)
    kind = config.threat_model.kind
    n_data = len(manifest)
    steps_per_epoch = math.ceil(n_data / config.batch_size)
    total_steps = (
        config.total_steps if config.total_steps is not None else config.epochs * steps_per_epoch
    )

    params = {k: v.clone().requires_grad_(True) for k, v in initial_tensors(config).items()}
    optimizer = None
    if kind is not Kind.LINF:
        optimizer = torch.optim.Adam(list(params.values()), lr=config.learning_rate)
    state = BanditState.init(len(space), reward_momentum=config.reward_momentum)
    sel_rng = np.random.default_rng(_derive_seed(config.seed, "select"))
    records: list[StepRecord] = []
    start_step = 0

    if resume_from is not None:
        payload = load_checkpoint(resume_from, digest)
        for name, tensor in payload["tensors"].items():
            if name not in params:
                raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
            with torch.no_grad():
                params[name].copy_(tensor)
        if optimizer is not None and payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        state = BanditState.from_dict(payload["bandit"])
        sel_rng = np.random.default_rng()
        sel_rng.bit_generator.state = payload["rng_state"]
        records = [StepRecord.from_dict(d) for d in payload["records"]]
        start_step = int(payload["step"])

    adapters: dict[int, object] = {}

    def adapter(i: int):
        if i not in adapters:
            adapters[i] = materialize(space.handles[i])
        return adapters[i]

    target_embs: dict[int, torch.Tensor] = {}

    def target_emb(i: int) -> torch.Tensor:
        if i not in target_embs:
            target_embs[i] = adapter(i).embed_texts([config.target_text])[0]
        return target_embs[i]

    eps_t = None
    if kind is Kind.LINF:
        eps_t = torch.as_tensor(config.threat_model.epsilon, dtype=params["delta"].dtype)

    for step in range(start_step, total_steps):
        t0 = time.perf_counter()
        idx = batch_indices(n_data, config.batch_size, step, config.seed)
        x = load_images(manifest, idx.tolist(), config.resolution)

        if kind is Kind.PATCH:
            m = torch.sigmoid(params["mask_logits"])
            x_adv = m * torch.sigmoid(params["pattern_logits"]) + (1.0 - m) * x
        else:
            x_adv = x + params["delta"]

        chosen = select(state, config.strategy, config.k, sel_rng, arm_ids=space.ids)
        compute_order = sorted(chosen)
        before_passes = {i: adapter(i).grad_pass_count for i in compute_order}
        loss_tensors = []
        losses: dict[str, float] = {}
        for i in compute_order:
            handle = space.handles[i]
            xa = _resize_batch(x_adv, handle.input_resolution)
            if config.targeted:
                li = objectives.target_loss(adapter(i), xa, target_emb(i))
            else:
                xc = _resize_batch(x, handle.input_resolution)
                li = objectives.similarity_loss(adapter(i), xc, xa)
            loss_tensors.append(li)
            losses[handle.id] = float(li.detach())
        grad_passes = sum(adapter(i).grad_pass_count - before_passes[i] for i in compute_order)

        state = update_rewards(state, compute_order, [losses[space.handles[i].id] for i in compute_order])

        ens = objectives.ensemble_loss(loss_tensors)
        reg_tensors: dict[str, torch.Tensor] = {}
        if kind is Kind.L2:
            reg_tensors["l2_norm"] = objectives.l2_reg_tensor(params["delta"], config.threat_model.c)
        elif kind is Kind.PATCH:
            reg_tensors = objectives.patch_reg_tensors(
                params["mask_logits"],
                params["pattern_logits"],
                config.threat_model.alpha,
                config.threat_model.beta,
            )
        total_loss = ens + sum(reg_tensors.values()) if reg_tensors else ens

        if not bool(torch.isfinite(total_loss).item()):
            trace = AttackTrace(records=records, final_state=state, config_digest=digest)
            raise AttackDivergedError(f"non-finite loss at step {step}", trace=trace)

        if kind is Kind.LINF:
            total_loss.backward()
            with torch.no_grad():
                delta = params["delta"]
                delta -= config.step_size * torch.sign(delta.grad)
                delta.clamp_(-eps_t, eps_t)
            params["delta"].grad = None
        else:
            optimizer.zero_grad()
            total_loss.backward()
            optimizer.step()

        max_abs = float(params["delta"].detach().abs().max()) if kind is Kind.LINF else None
        records.append(
            StepRecord(
                step=step,
                chosen=[space.handles[i].id for i in chosen],
                losses=losses,
                ensemble_loss=float(ens.detach()),
                reg_terms={k: float(v.detach()) for k, v in reg_tensors.items()},
                total_loss=float(total_loss.detach()),
                grad_passes=grad_passes,
                wall_time=time.perf_counter() - t0,
                max_abs_delta=max_abs,
            )
        )

        if config.log_every and (step + 1) % config.log_every == 0:
            log.info(
                "step %d/%d loss %.4f arms %s",
                step + 1,
                total_steps,
                records[-1].total_loss,
                records[-1].chosen,
            )
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(
                Path(config.checkpoint_dir) / "checkpoint.pt",
                digest,
                step + 1,
                params,
                optimizer,
                state,
                sel_rng,
                records,
            )

    trace = AttackTrace(records=records, final_state=state, config_digest=digest)
    return _build_perturbation(config, params, digest), trace
