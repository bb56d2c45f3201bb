"""End-to-end acceptance checks. Each test prints one CRITERION verdict line.

The heavy fixtures (encoder pool, big datasets, the paired run matrix)
are module-scoped so criteria 5-8 share one build. Budget-sensitive
checks time themselves and assert their own wall limits.
"""

import copy
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import binomtest

from uapkit import cli, objectives, zoo
from uapkit.bandit import BanditState, SelectionStrategy, select, ucb_scores
from uapkit.core import (
    Perturbation,
    PerturbationMeta,
    Task,
    ThreatModel,
    UapkitError,
    asr_percent,
    linf_bound_ok,
)
from uapkit.data import DatasetManifest, ShapesSpec, render_shapes_dataset
from uapkit.encoders import SearchSpace, ToyTrainConfig, clip_contrastive_loss, materialize, train_toy_encoder
from uapkit.encoders.toy import ToyAdapter
from uapkit.engine import AttackConfig, run_attack
from uapkit.evalharness import EvalJob, non_targeted_asr, run_job, zero_shot_classify

RES = (32, 32)
EPS = 6 / 255
STEPS = 250
N_PAIRED = 48
TARGET = "a photo of a yellow triangle"

# (handle id, train seed, conv width, embedding dim); last entry is the held-out victim
POOL = [
    ("p_s0", 0, 40, 40),
    ("p_s1", 1, 32, 40),
    ("p_s2", 2, 40, 40),
    ("p_s3", 3, 16, 24),
    ("p_s4", 4, 40, 40),
]

TIMINGS: dict[str, float] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n}: {detail}"


def rel_err(a: float, b: float, floor: float = 1e-12) -> float:
    if math.isinf(a) or math.isinf(b):
        return 0.0 if a == b else math.inf
    return abs(a - b) / max(abs(a), abs(b), floor)


def tv_brute(arr: np.ndarray) -> float:
    """Neighbor-difference loop in float64 over a [C,H,W] array."""
    c_, h_, w_ = arr.shape
    acc = 0.0
    for c in range(c_):
        for i in range(h_):
            for j in range(w_):
                if i + 1 < h_:
                    acc += abs(float(arr[c, i + 1, j]) - float(arr[c, i, j]))
                if j + 1 < w_:
                    acc += abs(float(arr[c, i, j + 1]) - float(arr[c, i, j]))
    return acc


@pytest.fixture(scope="module")
def acc_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def pool():
    t0 = time.perf_counter()
    handles = {}
    for hid, seed, width, dim in POOL:
        config = ToyTrainConfig(
            dataset=ShapesSpec(images_per_class=240, seed=seed, noise=0.08),
            epochs=10,
            width=width,
            embed_dim=dim,
        )
        handles[hid] = train_toy_encoder(config, seed=seed, handle_id=hid)
    TIMINGS["pool_train"] = time.perf_counter() - t0
    return handles


@pytest.fixture(scope="module")
def surrogate_space(pool):
    return SearchSpace(name="acc_pool", handles=tuple(pool[h] for h in ("p_s0", "p_s1", "p_s2", "p_s3")))


@pytest.fixture(scope="module")
def victim(pool):
    return pool["p_s4"]


@pytest.fixture(scope="module")
def attack_manifest(acc_dir):
    # one shared manifest object so the per-image decode cache persists across runs
    t0 = time.perf_counter()
    path = render_shapes_dataset(acc_dir / "attack", ShapesSpec(images_per_class=200, seed=7, noise=0.08))
    TIMINGS["attack_data"] = time.perf_counter() - t0
    return DatasetManifest.load(path)


@pytest.fixture(scope="module")
def eval_manifest(acc_dir):
    t0 = time.perf_counter()
    path = render_shapes_dataset(acc_dir / "eval", ShapesSpec(images_per_class=200, seed=99, noise=0.08))
    TIMINGS["eval_data"] = time.perf_counter() - t0
    return DatasetManifest.load(path)


@pytest.fixture(scope="module")
def eval_captioned(acc_dir):
    path = render_shapes_dataset(
        acc_dir / "evalcap", ShapesSpec(images_per_class=50, seed=101, noise=0.08), kind="captioned"
    )
    return DatasetManifest.load(path)


def run_linf(space, manifest_path, strategy, k, seed, steps=STEPS, epsilon=EPS, batch_size=64):
    config = AttackConfig(
        search_space=space,
        surrogate_dataset=manifest_path,
        threat_model=ThreatModel.linf(epsilon),
        strategy=strategy,
        k=k,
        total_steps=steps,
        batch_size=batch_size,
        step_size=1 / 255,
        reward_momentum=0.1,
        seed=seed,
        resolution=RES,
    )
    return run_attack(config)


@pytest.fixture(scope="module")
def matrix(surrogate_space, victim, attack_manifest, eval_manifest):
    """Paired UCB/random runs for seeds 0..N_PAIRED-1 plus the fixed-ensemble
    and single-surrogate baselines for seeds 0..4, all scored on the victim."""
    t0 = time.perf_counter()
    clean = zero_shot_classify(victim, eval_manifest)

    def score(p):
        return non_targeted_asr(clean, zero_shot_classify(victim, eval_manifest, p))

    ucb, rnd = {}, {}
    for seed in range(N_PAIRED):
        p, _ = run_linf(surrogate_space, attack_manifest, SelectionStrategy.ucb(), 1, seed)
        ucb[seed] = score(p)
        p, _ = run_linf(surrogate_space, attack_manifest, SelectionStrategy.random(), 1, seed)
        rnd[seed] = score(p)

    fixed_all = {}
    for seed in range(5):
        p, _ = run_linf(surrogate_space, attack_manifest, SelectionStrategy.fixed_all(), 4, seed)
        fixed_all[seed] = score(p)

    singles = {}
    for handle in surrogate_space.handles:
        singles[handle.id] = {}
        for seed in range(5):
            p, _ = run_linf(
                surrogate_space, attack_manifest, SelectionStrategy.fixed_set([handle.id]), 1, seed
            )
            singles[handle.id][seed] = score(p)

    TIMINGS["matrix"] = time.perf_counter() - t0
    return {"clean": clean, "ucb": ucb, "random": rnd, "fixed_all": fixed_all, "singles": singles}


def test_criterion_01_formula_oracles():
    rng = np.random.default_rng(42)
    t0 = time.perf_counter()
    worst = {}

    # ucb scores vs the closed form in pure python floats
    w = 0.0
    for _ in range(1000):
        n_arms = int(rng.integers(1, 9))
        counts = rng.integers(0, 31, size=n_arms)
        if rng.random() < 0.2:
            counts[:] = 0
        rewards = np.where(counts > 0, rng.normal(0, 2, size=n_arms), 0.0)
        state = BanditState(
            rewards=rewards.astype(np.float64),
            counts=counts.astype(np.int64),
            total=int(counts.sum()),
            reward_momentum=0.1,
        )
        got = ucb_scores(state)
        n = int(counts.sum())
        for i in range(n_arms):
            want = math.inf if (n == 0 or counts[i] == 0) else rewards[i] + math.sqrt(2.0 * math.log(n) / counts[i])
            w = max(w, rel_err(float(got[i]), want))
    worst["ucb"] = (w, 1e-9)

    # ensemble mean vs fsum
    w = 0.0
    for _ in range(1000):
        vals = [float(v) for v in rng.normal(0, 3, size=int(rng.integers(1, 9)))]
        w = max(w, rel_err(objectives.ensemble_loss(vals), math.fsum(vals) / len(vals)))
    worst["ensemble"] = (w, 1e-9)

    # asr percentage vs direct expression
    w = 0.0
    for _ in range(1000):
        sc = float(rng.uniform(0.5, 100.0))
        sa = float(rng.uniform(0.0, 100.0))
        w = max(w, rel_err(asr_percent(sc, sa), 100.0 * (sc - sa) / sc))
    worst["asr"] = (w, 1e-9)

    # symmetric infonce vs a double-precision log-softmax loop
    w = 0.0
    for _ in range(1000):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(4, 17))
        zi = torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=(b, d))), dim=-1)
        zt = torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=(b, d))), dim=-1)
        tau = float(rng.uniform(0.03, 1.0))
        got = float(clip_contrastive_loss(zi, zt, tau))
        logits = (zi @ zt.T) / tau
        acc = 0.0
        for j in range(b):
            acc += float(torch.logsumexp(logits[j], 0) - logits[j, j])
            acc += float(torch.logsumexp(logits[:, j], 0) - logits[j, j])
        w = max(w, rel_err(got, acc / (2 * b)))
    worst["infonce"] = (w, 1e-6)

    # total variation vs the brute-force neighbor loop
    w = 0.0
    for _ in range(1000):
        h, ww = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        t = torch.from_numpy(rng.normal(size=(3, h, ww))).float()
        w = max(w, rel_err(float(objectives.total_variation(t)), tv_brute(t.double().numpy())))
    worst["tv"] = (w, 1e-6)

    # weighted l2 norm and the patch regularizer trio
    w_l2, w_patch = 0.0, 0.0
    for _ in range(1000):
        delta = torch.from_numpy(rng.normal(size=(3, 5, 5))).float()
        c = float(rng.uniform(0.001, 0.1))
        w_l2 = max(w_l2, rel_err(float(objectives.l2_reg_tensor(delta, c)), c * math.sqrt(float((delta.double() ** 2).sum()))))
        mask = torch.from_numpy(rng.normal(size=(5, 5))).float()
        pattern = torch.from_numpy(rng.normal(size=(3, 5, 5))).float()
        alpha, beta = float(rng.uniform(1e-5, 1e-3)), float(rng.uniform(1.0, 100.0))
        regs = objectives.patch_reg_tensors(mask, pattern, alpha, beta)
        md, pd = mask.double(), pattern.double()
        w_patch = max(
            w_patch,
            rel_err(float(regs["l1_mask"]), alpha * float(torch.sigmoid(md).abs().sum())),
            rel_err(float(regs["tv_mask"]), beta * tv_brute(torch.sigmoid(md).unsqueeze(0).numpy())),
            rel_err(float(regs["tv_pattern"]), beta * tv_brute(torch.sigmoid(pd).numpy())),
        )
    worst["l2reg"] = (w_l2, 1e-6)
    worst["patchreg"] = (w_patch, 1e-6)

    wall = time.perf_counter() - t0
    bad = {k: v for k, (v, tol) in worst.items() if not v <= tol}
    detail = ", ".join(f"{k} {v:.2e}" for k, (v, _) in worst.items()) + f"; {wall:.1f}s"
    verdict(1, not bad and wall < 60.0, detail)


@pytest.fixture(scope="module")
def c2_run(tiny_space, tiny_manifest_path):
    config = AttackConfig(
        search_space=tiny_space,
        surrogate_dataset=tiny_manifest_path,
        threat_model=ThreatModel.linf(12 / 255),
        strategy=SelectionStrategy.ucb(),
        k=1,
        total_steps=500,
        batch_size=16,
        step_size=1 / 255,
        seed=0,
        resolution=RES,
    )
    t0 = time.perf_counter()
    p, trace = run_attack(config)
    return p, trace, time.perf_counter() - t0


def test_criterion_02_linf_bound_every_step(c2_run):
    p, trace, wall = c2_run
    bound = float(torch.as_tensor(12 / 255, dtype=torch.float32))
    violations = [r.step for r in trace.records if not r.max_abs_delta <= bound]
    ok = (
        len(trace.records) >= 500
        and not violations
        and linf_bound_ok(p.delta, 12 / 255)
        and wall < 600.0
    )
    verdict(
        2,
        ok,
        f"{len(trace.records)} steps, max|delta| <= {bound:.8f} at every step, "
        f"{len(violations)} violations, {wall:.1f}s",
    )


def test_criterion_03_play_accounting_and_topk(c2_run, surrogate_space, tiny_manifest_path):
    _, trace, _ = c2_run
    state = trace.final_state
    ok_counts = state.total == 500 * 1 == int(state.counts.sum())

    _, trace2 = run_linf(
        surrogate_space, tiny_manifest_path, SelectionStrategy.ucb(), 2, seed=0, steps=30, batch_size=16
    )
    s2 = trace2.final_state
    ok_counts2 = s2.total == 30 * 2 == int(s2.counts.sum())

    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(10_000):
        n_arms = int(rng.integers(1, 9))
        counts = rng.integers(0, 40, size=n_arms)
        rewards = np.where(counts > 0, rng.normal(0, 2, size=n_arms), 0.0)
        state = BanditState(
            rewards=rewards.astype(np.float64),
            counts=counts.astype(np.int64),
            total=int(counts.sum()),
            reward_momentum=0.1,
        )
        k = int(rng.integers(1, n_arms + 1))
        scores = ucb_scores(state)
        want = list(np.lexsort((np.arange(n_arms), -scores))[:k])
        if list(select(state, SelectionStrategy.ucb(), k)) != want:
            mismatches += 1
    verdict(
        3,
        ok_counts and ok_counts2 and mismatches == 0,
        f"n==j*k==sum(T_i) for 500x1 and 30x2; {mismatches}/10000 top-k mismatches",
    )


def _fd_worst(loss_fn, params, n_coords=24, h=1e-5, seed=0):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    # central differences cannot resolve below ulp(|f|)/2h; coordinates whose
    # gradient sits under that cancellation floor are compared absolutely at it
    noise = 40.0 * 2.22e-16 * max(1.0, abs(float(loss.detach()))) / (2 * h)
    floor = max(noise / 1e-4, 1e-8)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(params, grads):
        flat, gflat = t.view(-1), g.reshape(-1)
        idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        for i in idx:
            orig = float(flat[i].detach())
            with torch.no_grad():
                flat[i] = orig + h
            fp = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig - h
            fm = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - float(gflat[i])) / max(abs(fd), abs(float(gflat[i])), floor))
    return worst


def test_criterion_04_finite_difference_gradients(tiny_handle):
    adapter = materialize(tiny_handle)
    module = copy.deepcopy(adapter.module).double()
    ad = ToyAdapter(tiny_handle, module)

    g = torch.Generator().manual_seed(99)
    x = torch.rand(4, 3, 32, 32, generator=g, dtype=torch.float64)
    temb = ad.embed_texts([TARGET])[0]

    delta = ((torch.rand(3, 32, 32, generator=g, dtype=torch.float64) * 2 - 1) * (8 / 255)).requires_grad_()
    w_sim = _fd_worst(lambda: objectives.similarity_loss(ad, x, x + delta), [delta], seed=1)
    w_tgt = _fd_worst(lambda: objectives.target_loss(ad, x + delta, temb), [delta], seed=2)

    delta2 = (torch.randn(3, 32, 32, generator=g, dtype=torch.float64) * 0.03).requires_grad_()
    w_l2 = _fd_worst(
        lambda: objectives.similarity_loss(ad, x, x + delta2) + objectives.l2_reg_tensor(delta2, 0.025),
        [delta2],
        seed=3,
    )

    mask = (torch.randn(32, 32, generator=g, dtype=torch.float64) * 1.5).requires_grad_()
    pattern = (torch.randn(3, 32, 32, generator=g, dtype=torch.float64) * 1.5).requires_grad_()

    def patch_total():
        m = torch.sigmoid(mask)
        x_adv = m * torch.sigmoid(pattern) + (1.0 - m) * x
        regs = objectives.patch_reg_tensors(mask, pattern, 3e-5, 70.0)
        return objectives.similarity_loss(ad, x, x_adv) + sum(regs.values())

    w_patch = _fd_worst(patch_total, [mask, pattern], seed=4)

    worst = {"sim": w_sim, "target": w_tgt, "l2_total": w_l2, "patch_total": w_patch}
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + " (tol 1e-4, >=24 coords each)"
    verdict(4, all(v <= 1e-4 for v in worst.values()), detail)


def test_criterion_05_backward_pass_budget(surrogate_space, attack_manifest):
    from uapkit.data import load_images

    # decode every image up front so both timed runs see identical data costs
    load_images(attack_manifest, range(len(attack_manifest.entries)), RES)
    t0 = time.perf_counter()
    _, tr_k1 = run_linf(surrogate_space, attack_manifest, SelectionStrategy.ucb(), 1, 0, steps=40, batch_size=32)
    wall_k1 = time.perf_counter() - t0
    t0 = time.perf_counter()
    _, tr_k4 = run_linf(
        surrogate_space, attack_manifest, SelectionStrategy.fixed_all(), 4, 0, steps=40, batch_size=32
    )
    wall_k4 = time.perf_counter() - t0

    passes_ok = all(r.grad_passes == 1 for r in tr_k1.records) and all(r.grad_passes == 4 for r in tr_k4.records)
    ratio = wall_k1 / wall_k4
    verdict(
        5,
        passes_ok and wall_k1 <= 0.5 * wall_k4,
        f"grad passes k=1: all 1, fixed_all N=4: all 4; wall {wall_k1:.2f}s vs {wall_k4:.2f}s (ratio {ratio:.2f} <= 0.5)",
    )


def test_criterion_06_transfer_to_held_out_victim(matrix):
    ucb5 = [matrix["ucb"][s] for s in range(5)]
    fixed5 = [matrix["fixed_all"][s] for s in range(5)]
    ucb_mean = float(np.mean(ucb5))
    fixed_mean = float(np.mean(fixed5))
    single_means = {hid: float(np.mean(list(runs.values()))) for hid, runs in matrix["singles"].items()}
    best_single = max(single_means.values())
    budget = TIMINGS.get("pool_train", 0.0) + TIMINGS.get("attack_data", 0.0) + TIMINGS.get("eval_data", 0.0) + TIMINGS.get("matrix", 0.0)

    ok_a = ucb_mean >= 10.0 and fixed_mean >= 10.0
    ok_b = fixed_mean >= best_single
    ok_c = ucb_mean >= 0.8 * fixed_mean
    ok_t = budget < 1800.0
    verdict(
        6,
        ok_a and ok_b and ok_c and ok_t,
        f"victim ASR: ucb {ucb_mean:.2f}, fixed_all {fixed_mean:.2f}, best single {best_single:.2f} "
        f"(a>=10 {ok_a}, b {ok_b}, c>={0.8 * fixed_mean:.2f} {ok_c}); {budget:.0f}s < 1800s",
    )


def test_criterion_07_adaptive_beats_random(matrix):
    seeds = sorted(matrix["ucb"])
    diffs = [matrix["ucb"][s] - matrix["random"][s] for s in seeds]
    wins = sum(d > 0 for d in diffs)
    losses = sum(d < 0 for d in diffs)
    mean_ucb = float(np.mean([matrix["ucb"][s] for s in seeds]))
    mean_rnd = float(np.mean([matrix["random"][s] for s in seeds]))
    p_value = binomtest(wins, wins + losses, alternative="greater").pvalue if wins + losses else 1.0
    ok = len(seeds) >= 10 and mean_ucb >= mean_rnd and p_value < 0.1
    verdict(
        7,
        ok,
        f"{len(seeds)} paired seeds, mean ASR ucb {mean_ucb:.2f} vs random {mean_rnd:.2f}, "
        f"{wins}W/{losses}L/{len(seeds) - wins - losses}T, sign test p={p_value:.2e} < 0.1",
    )


def test_criterion_08_targeted_pull(surrogate_space, victim, attack_manifest, eval_captioned):
    config = AttackConfig(
        search_space=surrogate_space,
        surrogate_dataset=attack_manifest,
        threat_model=ThreatModel.linf(16 / 255),
        strategy=SelectionStrategy.fixed_all(),
        k=4,
        targeted=True,
        target_text=TARGET,
        total_steps=300,
        batch_size=64,
        step_size=1 / 255,
        seed=0,
        resolution=RES,
    )
    p, _ = run_attack(config)

    from uapkit.evalharness import embed_manifest_images

    adapter = materialize(victim)
    temb = adapter.embed_texts([TARGET])[0]
    clean_cos = float((embed_manifest_images(victim, eval_captioned) @ temb).mean())
    adv_cos = float((embed_manifest_images(victim, eval_captioned, p) @ temb).mean())

    report = run_job(
        EvalJob(task=Task.TARGETED_IR_RANK, victim=victim, manifest=eval_captioned, perturbation=p, trials=200, seed=0)
    )
    ok = (adv_cos - clean_cos) >= 0.1 and report.s_adv < report.s_clean
    verdict(
        8,
        ok,
        f"victim cos to target {clean_cos:.3f} -> {adv_cos:.3f} (delta {adv_cos - clean_cos:.3f} >= 0.1), "
        f"retrieval rank {report.s_clean:.1f} -> {report.s_adv:.1f}",
    )


def _random_artifact(rng: np.random.Generator, i: int) -> Perturbation:
    kind = ("linf", "l2", "patch")[i % 3]
    h, w = int(rng.integers(8, 64)), int(rng.integers(8, 64))
    targeted = bool(rng.integers(0, 2))
    text = f"a photo of artifact {i}" if targeted else None
    meta = PerturbationMeta(config_digest=f"{i:064d}")
    gen = torch.Generator().manual_seed(1000 + i)
    if kind == "linf":
        eps = float(rng.uniform(1 / 255, 32 / 255))
        delta = (torch.rand(3, h, w, generator=gen) * 2 - 1) * eps
        tm = ThreatModel.linf(eps)
        return Perturbation(tm, (h, w), delta=delta, targeted=targeted, target_text=text, meta=meta)
    if kind == "l2":
        delta = torch.randn(3, h, w, generator=gen) * float(rng.uniform(0.01, 0.3))
        tm = ThreatModel.l2(float(rng.uniform(0.005, 0.1)))
        return Perturbation(tm, (h, w), delta=delta, targeted=targeted, target_text=text, meta=meta)
    tm = ThreatModel.patch(float(rng.uniform(1e-5, 1e-3)), float(rng.uniform(1.0, 100.0)))
    return Perturbation(
        tm,
        (h, w),
        mask_logits=torch.randn(h, w, generator=gen) * 3,
        pattern_logits=torch.randn(3, h, w, generator=gen) * 3,
        targeted=targeted,
        target_text=text,
        meta=meta,
    )


def test_criterion_09_zoo_round_trip_and_fuzz(acc_dir):
    rng = np.random.default_rng(23)
    zoo_dir = acc_dir / "zoo_fuzz"
    exact = 0
    rejected = 0
    meta_rejected = 0
    kinds = set()
    for i in range(100):
        p = _random_artifact(rng, i)
        kinds.add(p.threat_model.kind.value)
        path = Path(zoo.save_perturbation(p, zoo_dir / f"art{i:03d}.json")["path"])
        q = zoo.load_artifact(path)
        same = (
            all(torch.equal(p.tensors()[n], q.tensors()[n]) for n in p.tensors())
            and q.threat_model.to_dict() == p.threat_model.to_dict()
            and q.resolution == p.resolution
            and q.targeted == p.targeted
            and q.target_text == p.target_text
            and q.meta.to_dict() == p.meta.to_dict()
        )
        exact += same

        name = rng.choice(sorted(p.tensors()))
        blob_path = zoo_dir / f"art{i:03d}__{name}.bin"
        blob = bytearray(blob_path.read_bytes())
        pos = int(rng.integers(0, len(blob)))
        blob[pos] ^= int(rng.integers(1, 256))
        blob_path.write_bytes(bytes(blob))
        try:
            zoo.load_artifact(path)
        except UapkitError:
            rejected += 1

        if i % 10 == 0:
            metadata = json.loads(path.read_text())
            value = metadata["digest"]["value"]
            metadata["digest"]["value"] = ("0" if value[0] != "0" else "1") + value[1:]
            tampered = zoo_dir / f"art{i:03d}_tampered.json"
            tampered.write_text(json.dumps(metadata))
            try:
                zoo.load_artifact(tampered)
            except UapkitError:
                meta_rejected += 1

    ok = exact == 100 and rejected == 100 and meta_rejected == 10 and kinds == {"linf", "l2", "patch"}
    verdict(
        9,
        ok,
        f"{exact}/100 bit-exact round-trips over {sorted(kinds)}, "
        f"{rejected}/100 payload byte flips rejected, {meta_rejected}/10 digest tampers rejected",
    )


def _cli_pipeline(dst: Path, images_dir: Path, data_manifest: Path, seed: int = 11) -> dict:
    dst.mkdir(parents=True, exist_ok=True)
    toy_cfg = dst / "toy.json"
    toy_cfg.write_text(
        json.dumps(
            {
                "schema_version": 1,
                "space_name": "acc_cli",
                "encoders": [
                    {
                        "seed": s,
                        "id": f"acc_cli_s{s}",
                        "dataset": {"images_per_class": 12, "seed": s, "noise": 0.08},
                        "epochs": 2,
                        "width": 8,
                        "embed_dim": 8,
                    }
                    for s in (0, 1)
                ],
            }
        )
    )
    assert cli.main(["toy-train", "--config", str(toy_cfg), "--out", str(dst / "toys")]) == 0

    gen_cfg = dst / "gen.json"
    gen_cfg.write_text(
        json.dumps(
            {
                "schema_version": 1,
                "artifact_id": "acc_uap",
                "attack": {
                    "search_space": str(dst / "toys" / "search_space.json"),
                    "surrogate_dataset": str(data_manifest),
                    "threat_model": {"kind": "linf", "epsilon": 8 / 255},
                    "strategy": {"kind": "ucb"},
                    "k": 1,
                    "total_steps": 20,
                    "batch_size": 8,
                    "step_size": 2 / 255,
                    "seed": seed,
                    "resolution": [32, 32],
                },
            }
        )
    )
    assert cli.main(["generate", "--config", str(gen_cfg), "--out", str(dst / "gen")]) == 0

    eval_cfg = dst / "eval.json"
    eval_cfg.write_text(
        json.dumps(
            {
                "schema_version": 1,
                "victims": [{"search_space": str(dst / "toys" / "search_space.json"), "ids": ["acc_cli_s1"]}],
                "datasets": [str(data_manifest)],
                "tasks": ["zero_shot"],
                "perturbations": [str(dst / "gen" / "acc_uap.json")],
                "seed": 0,
            }
        )
    )
    assert cli.main(["evaluate", "--config", str(eval_cfg), "--out", str(dst / "eval")]) == 0

    assert (
        cli.main(
            [
                "zoo",
                "apply",
                "--artifact",
                str(dst / "gen" / "acc_uap.json"),
                "--images",
                str(images_dir),
                "--out",
                str(dst / "applied"),
            ]
        )
        == 0
    )

    return {
        "payload": (dst / "gen" / "acc_uap__delta.bin").read_bytes(),
        "summary": json.loads((dst / "gen" / "summary.json").read_text()),
        "report": json.loads((dst / "eval" / "report.json").read_text()),
        "applied": {f.name: f.read_bytes() for f in sorted((dst / "applied").iterdir())},
    }


def test_criterion_10_cli_pipeline_deterministic(acc_dir, tiny_manifest_path):
    from PIL import Image

    images_dir = acc_dir / "cli_images"
    images_dir.mkdir()
    img_rng = np.random.default_rng(3)
    for i in range(3):
        Image.fromarray(img_rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)).save(images_dir / f"i{i}.png")

    a = _cli_pipeline(acc_dir / "cli_a", images_dir, tiny_manifest_path)
    b = _cli_pipeline(acc_dir / "cli_b", images_dir, tiny_manifest_path)

    row_keys = {"task", "dataset_id", "victim_id", "metric_name", "s_clean", "s_adv", "asr", "extras"}
    summary_keys = {"artifact_id", "artifact", "digest", "config_digest", "steps", "final_total_loss", "arm_histogram", "bandit", "wall_time_s"}
    schema_ok = (
        set(a["report"]) == {"reports", "failures"}
        and a["report"]["failures"] == []
        and all(row_keys <= set(r) for r in a["report"]["reports"])
        and summary_keys <= set(a["summary"])
    )
    deterministic = (
        a["payload"] == b["payload"]
        and a["summary"]["digest"] == b["summary"]["digest"]
        and a["report"] == b["report"]
        and a["applied"] == b["applied"]
    )
    verdict(
        10,
        schema_ok and deterministic,
        f"exit codes 0 end to end; reports schema-valid; two seeded runs identical "
        f"(digest {a['summary']['digest'][:12]}..., {len(a['applied'])} perturbed images byte-equal)",
    )
