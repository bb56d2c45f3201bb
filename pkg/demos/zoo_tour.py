"""Perturbation zoo mechanics: save, index, reload, verify, tamper.

No training here; artifacts are synthesized directly.
"""

from pathlib import Path

import torch

from uapkit import Perturbation, ThreatModel
from uapkit.zoo import (
    DigestMismatchError,
    ZooIndex,
    list_attackers,
    list_threat_models,
    load_attacker,
    register_artifact,
    save_perturbation,
)

OUT = Path("demo_out/zoo")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(0)

    eps = 12 / 255
    linf = Perturbation(
        ThreatModel.linf(eps), (32, 32), delta=(torch.rand(3, 32, 32, generator=gen) * 2 - 1) * eps
    )
    patch = Perturbation(
        ThreatModel.patch(),
        (32, 32),
        mask_logits=torch.randn(32, 32, generator=gen),
        pattern_logits=torch.randn(3, 32, 32, generator=gen),
        targeted=True,
        target_text="a photo of a red circle",
    )

    index = ZooIndex(base=OUT)
    for name, p in [("demo_linf", linf), ("demo_patch", patch)]:
        descriptor = save_perturbation(p, OUT / f"{name}.json")
        register_artifact(index, descriptor["path"], name)
        print(f"saved {name}: digest {descriptor['digest'][:16]}...")
    index.save(OUT / "zoo_index.json")

    index = ZooIndex.load(OUT / "zoo_index.json")
    for key in list_threat_models(index):
        for aid in list_attackers(index, key):
            q = load_attacker(index, key, aid)
            print(f"loaded {key}/{aid}: resolution {q.resolution}, targeted={q.targeted}")

    # flip one payload byte; the loader must refuse it
    blob_path = OUT / "demo_linf__delta.bin"
    blob = bytearray(blob_path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    blob_path.write_bytes(bytes(blob))
    try:
        load_attacker(index, "linf_non_targeted", "demo_linf")
        print("tampered artifact loaded -- this should never print")
    except DigestMismatchError as exc:
        print(f"tampered artifact rejected: {exc}")


if __name__ == "__main__":
    main()
