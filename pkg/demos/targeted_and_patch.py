"""Two threat models beyond plain LINF: a targeted perturbation that
drags every image toward one caption, and an additive-free patch whose
mask/pattern are optimized jointly with Adam.
"""

import argparse
from pathlib import Path

import torch

from uapkit import (
    AttackConfig,
    DatasetManifest,
    SearchSpace,
    SelectionStrategy,
    ShapesSpec,
    ThreatModel,
    ToyTrainConfig,
    render_shapes_dataset,
    run_attack,
    train_toy_encoder,
)
from uapkit.encoders import materialize
from uapkit.evalharness import embed_manifest_images

TARGET = "a photo of a yellow triangle"


def build_pool(out):
    attack_data = render_shapes_dataset(out / "attack_data", ShapesSpec(images_per_class=60, seed=7))
    eval_data = DatasetManifest.load(
        render_shapes_dataset(out / "eval_data", ShapesSpec(images_per_class=40, seed=99))
    )
    handles = tuple(
        train_toy_encoder(
            ToyTrainConfig(dataset=ShapesSpec(images_per_class=120, seed=s), epochs=6, width=24, embed_dim=24),
            seed=s,
            handle_id=f"toy_s{s}",
        )
        for s in range(3)
    )
    return attack_data, eval_data, SearchSpace(name="demo_pool", handles=handles[:2]), handles[2]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out/threat_models")
    ap.add_argument("--steps", type=int, default=150)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    attack_data, eval_data, surrogates, victim = build_pool(out)
    adapter = materialize(victim)
    temb = adapter.embed_texts([TARGET])[0]

    # targeted: maximize similarity to the target caption on every image
    config = AttackConfig(
        search_space=surrogates,
        surrogate_dataset=attack_data,
        threat_model=ThreatModel.linf(16 / 255),
        strategy=SelectionStrategy.fixed_all(),
        k=2,
        targeted=True,
        target_text=TARGET,
        total_steps=args.steps,
        batch_size=32,
        step_size=1 / 255,
        seed=0,
        resolution=(32, 32),
    )
    p_t, _ = run_attack(config)
    clean_cos = float((embed_manifest_images(victim, eval_data) @ temb).mean())
    adv_cos = float((embed_manifest_images(victim, eval_data, p_t) @ temb).mean())
    print(f"[targeted linf] victim cos to {TARGET!r}: {clean_cos:+.3f} -> {adv_cos:+.3f}")

    # patch: mask + pattern logits, Adam, L1/TV regularizers keep it small and smooth
    config = AttackConfig(
        search_space=surrogates,
        surrogate_dataset=attack_data,
        threat_model=ThreatModel.patch(alpha=3e-5, beta=40.0),
        strategy=SelectionStrategy.ucb(),
        k=1,
        total_steps=args.steps,
        batch_size=32,
        learning_rate=0.05,
        seed=0,
        resolution=(32, 32),
    )
    p_patch, trace = run_attack(config)
    last = trace.records[-1]
    area = float(torch.sigmoid(p_patch.mask_logits).mean())
    print(f"[patch] final loss {last.total_loss:+.4f}, reg terms {{", end="")
    print(", ".join(f"{k}: {v:.4f}" for k, v in last.reg_terms.items()), end="}\n")
    print(f"[patch] mean mask opacity {area:.3f}")

    emb_c = embed_manifest_images(victim, eval_data)
    emb_a = embed_manifest_images(victim, eval_data, p_patch)
    drift = float((emb_c * emb_a).sum(dim=-1).mean())
    print(f"[patch] victim embedding similarity clean vs patched: {drift:+.3f} (1.0 = no effect)")


if __name__ == "__main__":
    main()
