"""Transferability evaluation over dataset manifests and victim encoders.

Zero-shot classification, image-text retrieval (TR@1 / IR@1), targeted
zero-shot success, and targeted image-retrieval rank. Perturbations are
rescaled to each victim's input resolution before application. All
metrics are exact integer-count fractions, so entry order and worker
count cannot change results.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import (
    EvalReport,
    Perturbation,
    Task,
    ValidationError,
    asr_percent,
    rescale_perturbation,
)
from .data import KIND_CAPTIONED, KIND_CLASSIFICATION, DatasetManifest, load_images
from .encoders import EncoderAdapter, EncoderHandle, materialize

TARGET_TEMPLATE = "an image of {}"


def _as_adapter(victim: EncoderHandle | EncoderAdapter) -> EncoderAdapter:
    if isinstance(victim, EncoderHandle):
        return materialize(victim)
    return victim


def embed_manifest_images(
    victim: EncoderHandle | EncoderAdapter,
    manifest: DatasetManifest,
    perturbation: Perturbation | None = None,
    batch_size: int = 64,
) -> torch.Tensor:
    """Unit image embeddings for every manifest entry, in entry order."""
    adapter = _as_adapter(victim)
    resolution = adapter.handle.input_resolution
    p = None
    if perturbation is not None:
        p = rescale_perturbation(perturbation, resolution)
    chunks = []
    for start in range(0, len(manifest), batch_size):
        idx = list(range(start, min(start + batch_size, len(manifest))))
        x = load_images(manifest, idx, resolution)
        if p is not None:
            x = p(x)
        chunks.append(adapter.embed_pixels(x))
    return torch.cat(chunks, dim=0)


def _class_text_embeddings(adapter: EncoderAdapter, manifest: DatasetManifest) -> torch.Tensor:
    texts = [manifest.prompt_template.format(name) for name in manifest.class_names]
    return adapter.embed_texts(texts)


def zero_shot_classify(
    victim: EncoderHandle | EncoderAdapter,
    manifest: DatasetManifest,
    perturbation: Perturbation | None = None,
    batch_size: int = 64,
) -> float:
    """Top-1 accuracy (percent) of nearest templated-class-name matching."""
    if manifest.kind != KIND_CLASSIFICATION:
        raise ValidationError("zero_shot_classify requires a classification manifest")
    adapter = _as_adapter(victim)
    z_text = _class_text_embeddings(adapter, manifest)
    z_img = embed_manifest_images(adapter, manifest, perturbation, batch_size)
    preds = (z_img @ z_text.T).argmax(dim=1)
    labels = torch.tensor([e.label for e in manifest.entries], dtype=torch.long)
    return 100.0 * float((preds == labels).double().mean())


def non_targeted_asr(s_clean: float, s_adv: float) -> float:
    """100*(s_clean - s_adv)/s_clean; NaN sentinel when s_clean == 0."""
    return asr_percent(s_clean, s_adv)


def retrieval_metrics(
    victim: EncoderHandle | EncoderAdapter,
    manifest: DatasetManifest,
    perturbation: Perturbation | None = None,
    batch_size: int = 64,
) -> dict:
    """TR@1: top caption for an image is one of its ground-truth captions.
    IR@1: top image for a caption is the caption's source image."""
    if manifest.kind != KIND_CAPTIONED:
        raise ValidationError("retrieval_metrics requires a captioned manifest")
    adapter = _as_adapter(victim)
    captions: list[str] = []
    owner: list[int] = []
    for i, entry in enumerate(manifest.entries):
        for c in entry.captions:
            captions.append(c)
            owner.append(i)
    z_text = adapter.embed_texts(captions)
    z_img = embed_manifest_images(adapter, manifest, perturbation, batch_size)
    sims = z_img @ z_text.T

    top_caption = sims.argmax(dim=1)
    tr_hits = sum(
        1
        for i in range(len(manifest))
        if captions[int(top_caption[i])] in manifest.entries[i].captions
    )
    top_image = sims.argmax(dim=0)
    ir_hits = sum(1 for j in range(len(captions)) if int(top_image[j]) == owner[j])
    return {
        "TR@1": 100.0 * tr_hits / len(manifest),
        "IR@1": 100.0 * ir_hits / len(captions),
    }


def target_class_rates(
    victim: EncoderHandle | EncoderAdapter,
    manifest: DatasetManifest,
    p: Perturbation,
    target_template: str = TARGET_TEMPLATE,
    batch_size: int = 64,
) -> tuple[float, float]:
    """(clean, perturbed) percentages of images whose nearest class, with the
    templated target appended to the class set, is the target."""
    if not p.targeted:
        raise ValidationError("targeted evaluation requires a targeted perturbation")
    if manifest.kind != KIND_CLASSIFICATION:
        raise ValidationError("target_class_rates requires a classification manifest")
    adapter = _as_adapter(victim)
    z_text = _class_text_embeddings(adapter, manifest)
    z_target = adapter.embed_texts([target_template.format(p.target_text)])
    z_all = torch.cat([z_text, z_target], dim=0)
    target_idx = z_all.shape[0] - 1

    rates = []
    for pert in (None, p):
        z_img = embed_manifest_images(adapter, manifest, pert, batch_size)
        preds = (z_img @ z_all.T).argmax(dim=1)
        rates.append(100.0 * float((preds == target_idx).double().mean()))
    return rates[0], rates[1]


def targeted_zs_asr(
    victim: EncoderHandle | EncoderAdapter,
    manifest: DatasetManifest,
    p: Perturbation,
    target_template: str = TARGET_TEMPLATE,
    batch_size: int = 64,
) -> float:
    """Percentage of perturbed images classified as the adversarial target."""
    return target_class_rates(victim, manifest, p, target_template, batch_size)[1]


def _ir_ranks(
    adapter: EncoderAdapter,
    manifest: DatasetManifest,
    p: Perturbation | None,
    target_text: str,
    trials: int,
    rng: np.random.Generator,
    batch_size: int = 64,
) -> np.ndarray:
    resolution = adapter.handle.input_resolution
    z_query = adapter.embed_texts([target_text])[0]
    z_gallery = embed_manifest_images(adapter, manifest, None, batch_size)
    sims_clean = (z_gallery @ z_query).numpy()
    p_res = rescale_perturbation(p, resolution) if p is not None else None

    ranks = np.empty(trials, dtype=np.int64)
    for t in range(trials):
        i = int(rng.integers(len(manifest)))
        if p_res is None:
            s_i = sims_clean[i]
        else:
            x = load_images(manifest, [i], resolution)
            s_i = float(adapter.embed_pixels(p_res(x))[0] @ z_query)
        others = np.delete(sims_clean, i)
        # competition ranking: 1 + number of strictly better gallery images
        ranks[t] = 1 + int((others > s_i).sum())
    return ranks


def targeted_ir_rank(
    victim: EncoderHandle | EncoderAdapter,
    manifest: DatasetManifest,
    p: Perturbation,
    trials: int = 50,
    rng: np.random.Generator | None = None,
    batch_size: int = 64,
) -> tuple[float, float]:
    """Mean and std of the perturbed image's 1-based rank for the target-text
    query, over trials with a randomly chosen image per trial."""
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    if not p.targeted:
        raise ValidationError("targeted evaluation requires a targeted perturbation")
    if manifest.kind != KIND_CAPTIONED:
        raise ValidationError("targeted_ir_rank requires a captioned manifest")
    if rng is None:
        rng = np.random.default_rng(0)
    adapter = _as_adapter(victim)
    ranks = _ir_ranks(adapter, manifest, p, p.target_text, trials, rng, batch_size)
    return float(ranks.mean()), float(ranks.std())


_METRIC_NAMES = {
    Task.ZERO_SHOT: "top1_accuracy",
    Task.TEXT_RETRIEVAL: "TR@1",
    Task.IMAGE_RETRIEVAL: "IR@1",
    Task.TARGETED_ZS: "target_success",
    Task.TARGETED_IR_RANK: "ir_rank",
}


@dataclass(frozen=True)
class EvalJob:
    task: Task
    victim: EncoderHandle
    manifest: DatasetManifest
    perturbation: Perturbation | None = None
    trials: int = 50
    target_template: str = TARGET_TEMPLATE
    seed: int = 0
    batch_size: int = 64

    def describe(self) -> dict:
        return {
            "task": Task(self.task).value,
            "victim": self.victim.id,
            "dataset": self.manifest.id,
        }


def run_job(job: EvalJob) -> EvalReport:
    task = Task(job.task)
    adapter = _as_adapter(job.victim)
    if task is Task.ZERO_SHOT:
        s_clean = zero_shot_classify(adapter, job.manifest, None, job.batch_size)
        s_adv = zero_shot_classify(adapter, job.manifest, job.perturbation, job.batch_size)
    elif task in (Task.TEXT_RETRIEVAL, Task.IMAGE_RETRIEVAL):
        key = _METRIC_NAMES[task]
        s_clean = retrieval_metrics(adapter, job.manifest, None, job.batch_size)[key]
        s_adv = retrieval_metrics(adapter, job.manifest, job.perturbation, job.batch_size)[key]
    elif task is Task.TARGETED_ZS:
        s_clean, s_adv = target_class_rates(
            adapter, job.manifest, job.perturbation, job.target_template, job.batch_size
        )
    elif task is Task.TARGETED_IR_RANK:
        p = job.perturbation
        if p is None or not p.targeted:
            raise ValidationError("targeted_ir_rank job requires a targeted perturbation")
        clean = _ir_ranks(
            adapter,
            job.manifest,
            None,
            p.target_text,
            job.trials,
            np.random.default_rng(job.seed),
            job.batch_size,
        )
        adv = _ir_ranks(
            adapter,
            job.manifest,
            p,
            p.target_text,
            job.trials,
            np.random.default_rng(job.seed),
            job.batch_size,
        )
        return EvalReport.from_scores(
            task=task,
            dataset_id=job.manifest.id,
            victim_id=job.victim.id,
            metric_name=_METRIC_NAMES[task],
            s_clean=float(clean.mean()),
            s_adv=float(adv.mean()),
            extras={
                "rank_std_clean": float(clean.std()),
                "rank_std_adv": float(adv.std()),
                "trials": job.trials,
            },
        )
    else:
        raise ValidationError(f"unsupported task {task}")
    return EvalReport.from_scores(
        task=task,
        dataset_id=job.manifest.id,
        victim_id=job.victim.id,
        metric_name=_METRIC_NAMES[task],
        s_clean=s_clean,
        s_adv=s_adv,
    )


def run_matrix(jobs, workers: int = 1) -> tuple[list[EvalReport], list[dict]]:
    """Run jobs (optionally in a thread pool); results keep submission order,
    failures are collected instead of aborting the matrix."""
    reports: list[EvalReport] = []
    failures: list[dict] = []
    if workers <= 1:
        outcomes = []
        for job in jobs:
            try:
                outcomes.append((job, run_job(job), None))
            except Exception as exc:
                outcomes.append((job, None, exc))
    else:
        jobs = list(jobs)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_job, job) for job in jobs]
            outcomes = []
            for job, fut in zip(jobs, futures):
                try:
                    outcomes.append((job, fut.result(), None))
                except Exception as exc:
                    outcomes.append((job, None, exc))
    for job, report, exc in outcomes:
        if exc is None:
            reports.append(report)
        else:
            failures.append({**job.describe(), "error": f"{type(exc).__name__}: {exc}"})
    return reports, failures


def write_report_json(reports, failures, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "reports": [r.to_dict() for r in reports],
        "failures": list(failures),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_report_csv(reports, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "dataset", "victim", "metric", "s_clean", "s_adv", "asr"])
        for r in reports:
            writer.writerow(
                [
                    r.task.value,
                    r.dataset_id,
                    r.victim_id,
                    r.metric_name,
                    repr(r.s_clean),
                    repr(r.s_adv),
                    repr(r.asr),
                ]
            )
    return path
