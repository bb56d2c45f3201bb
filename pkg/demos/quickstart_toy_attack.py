"""Quickstart: train a few toy dual encoders, optimize a universal
perturbation with bandit surrogate selection, and score it on an
encoder the attack never saw.

Runs on CPU in about a minute. Outputs land in ./demo_out/quickstart.
"""

import argparse
from pathlib import Path

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
from uapkit.evalharness import non_targeted_asr, zero_shot_classify
from uapkit.zoo import save_perturbation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out/quickstart")
    ap.add_argument("--steps", type=int, default=120)
    ap.add_argument("--eps", type=float, default=8 / 255)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    print("== rendering shapes datasets ==")
    attack_data = render_shapes_dataset(out / "attack_data", ShapesSpec(images_per_class=60, seed=7))
    eval_data = DatasetManifest.load(
        render_shapes_dataset(out / "eval_data", ShapesSpec(images_per_class=60, seed=99))
    )

    print("== training 4 toy encoders (3 surrogates + 1 held-out victim) ==")
    handles = []
    for seed in range(4):
        cfg = ToyTrainConfig(
            dataset=ShapesSpec(images_per_class=120, seed=seed),
            epochs=6,
            width=24,
            embed_dim=24,
        )
        h = train_toy_encoder(cfg, seed=seed, handle_id=f"toy_s{seed}")
        handles.append(h)
        print(f"  trained {h.id}")
    surrogates = SearchSpace(name="demo_pool", handles=tuple(handles[:3]))
    victim = handles[3]

    print(f"== optimizing LINF eps={args.eps:.4f}, UCB k=1, {args.steps} steps ==")
    config = AttackConfig(
        search_space=surrogates,
        surrogate_dataset=attack_data,
        threat_model=ThreatModel.linf(args.eps),
        strategy=SelectionStrategy.ucb(),
        k=1,
        total_steps=args.steps,
        batch_size=32,
        step_size=1 / 255,
        seed=0,
        resolution=(32, 32),
    )
    p, trace = run_attack(config)
    for r in trace.records[:: max(1, args.steps // 8)]:
        print(f"  step {r.step:4d}  chose {r.chosen[0]:8s}  loss {r.total_loss:+.4f}")
    print(f"  selections: {trace.arm_histogram()}")

    clean = zero_shot_classify(victim, eval_data)
    adv = zero_shot_classify(victim, eval_data, p)
    print(f"== victim ({victim.id}, never attacked directly) ==")
    print(f"  zero-shot accuracy {clean:.2f}% -> {adv:.2f}%  (ASR {non_targeted_asr(clean, adv):.2f})")

    descriptor = save_perturbation(p, out / "uap_linf.json")
    print(f"saved artifact {descriptor['path']} (digest {descriptor['digest'][:12]}...)")


if __name__ == "__main__":
    main()
