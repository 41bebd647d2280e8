"""Acceptance criteria, one test each; a summary line per criterion is
printed at the end of the pytest run."""

import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from ditbs import autodiff as ad
from ditbs import tsr
from ditbs.blockselect import (DistanceTable, RandomConvEmbedder, build_distance_table,
                               select_skip_indices)
from ditbs.cli import main
from ditbs.costmodel import GIB, ArchSpec, flops_report, load_preset, memory_report, param_count
from ditbs.data import read_ppm, synthetic_dataset, write_ppm
from ditbs.lora import inject
from ditbs.model import Block, DiTConfig, MaskSpec, ToyDiT, cross_attention_mask, load_checkpoint, \
    save_checkpoint
from ditbs.patches import PatchPlannerConfig, patch_size
from ditbs.schedule import build_inputs, iter_schedule
from ditbs.skip import ResidualCache, SkipPlan, compute_k, precompute, skipped_forward
from ditbs.train import TrainConfig, ablation_modes, pretrain_base, read_metrics, train

from test_costmodel import instantiated_count, runtime_precompute_flops, runtime_train_flops


def _report(record_property, crit, detail, seconds, limit=None):
    budget = f" (budget {limit:g}s)" if limit else ""
    record_property("criterion", crit)
    record_property("detail", f"{detail}; {seconds:.1f}s{budget}")


# ---------------------------------------------------------------------------
# 1


def _random_toy(rng):
    heads = int(rng.integers(1, 4))
    patch = int(rng.choice([2, 4]))
    return DiTConfig(depth=int(rng.integers(3, 8)), hidden=heads * int(rng.choice([2, 4, 8])),
                     heads=heads, patch=patch, img_size=patch * int(rng.integers(1, 5)),
                     vocab=32, n_text=4)


def test_1_identity_at_init(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    ds = synthetic_dataset(n=3, size=32, seed=1)
    worst = 0.0
    for trial in range(50):
        cfg = _random_toy(rng)
        k = int(rng.integers(0, cfg.depth))
        n = int(rng.integers(0, k + 1))
        plan = SkipPlan(n, k - n, cfg.depth)
        patch_cfg = PatchPlannerConfig(cfg.img_size, 32, cfg.max_t, 4 if cfg.img_size % 4 == 0 else 2)
        seed = int(rng.integers(0, 2**31))
        model = ToyDiT(cfg, seed)
        cache = precompute(model, ds, patch_cfg, plan, 1, 2, seed, bytes(32), workers=1)
        steps = list(iter_schedule(seed, 1, 2, ds.sizes(), patch_cfg))
        inputs = [build_inputs(s, ds, patch_cfg, cfg) for s in steps]
        full = [model.forward(i.x_t, i.text_ids, i.t)[0].data for i in inputs]
        model.drop_blocks(plan.skipped)
        inject(model, plan.resident, rank=int(rng.integers(1, 5)), seed=seed)
        for e, s, i, ref in zip(cache.entries, steps, inputs, full):
            out = skipped_forward(model, i, plan, e, s).data
            worst = max(worst, float(np.abs(out - ref).max() / np.abs(ref).max()))
    dt = time.perf_counter() - t0
    _report(record_property, "1 identity-at-init", f"worst relative error {worst:.2e} < 1e-5 over 50 triples", dt, 30)
    assert worst < 1e-5
    assert dt < 30


# ---------------------------------------------------------------------------
# 2


def test_2_block_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    cfg = DiTConfig(depth=3, hidden=8, heads=2, patch=2, img_size=4, vocab=8, n_text=2)
    worst = 0.0
    for seed in range(5):
        def build(seed=seed):
            rng = np.random.default_rng(seed)
            blk = Block(cfg, rng)
            x = ad.Tensor(rng.standard_normal((1, 6, cfg.hidden)), requires_grad=True)
            r = ad.Tensor(rng.standard_normal((1, 6, cfg.hidden)))
            mask = cross_attention_mask(cfg.n_text, 6) if seed % 2 else None
            params = dict(blk.params())
            for p in params.values():
                p.requires_grad = True
            params["input"] = x
            return params, lambda: ad.sum_all(ad.mul(blk(x, mask), r))

        rep = ad.grad_check(build, tolerance=1e-4)
        worst = max(worst, max(rep.errors.values()))
    dt = time.perf_counter() - t0
    _report(record_property, "2 gradient fidelity", f"max relative error {worst:.2e} < 1e-4, 5 seeds", dt, 60)
    assert worst < 1e-4
    assert dt < 60


# ---------------------------------------------------------------------------
# 3


def test_3_skip_count(record_property):
    t0 = time.perf_counter()
    got = {(L, r): compute_k(r, L) for L in (57, 20) for r in (0.3, 0.4, 0.5)}
    want = {(57, 0.3): 17, (57, 0.4): 23, (57, 0.5): 29, (20, 0.3): 6, (20, 0.4): 8, (20, 0.5): 10}
    _report(record_property, "3 skip count", f"L=57 -> {[got[57, r] for r in (0.3, 0.4, 0.5)]}, "
            f"L=20 -> {[got[20, r] for r in (0.3, 0.4, 0.5)]}", time.perf_counter() - t0)
    assert got == want


# ---------------------------------------------------------------------------
# 4


def test_4_selection_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    ties = 0
    for i in range(1000):
        L = int(rng.integers(3, 61))
        if i % 3 == 0:      # small integers: many exact ties
            front, back = rng.integers(0, 3, L - 1).astype(float), rng.integers(0, 3, L - 1).astype(float)
        elif i % 3 == 1:    # constant table: every split ties
            front = back = np.full(L - 1, float(rng.random()))
        else:
            front, back = rng.random(L - 1) * 2, rng.random(L - 1) * 2
        k = int(rng.integers(2, L))
        scores = [(front[n - 1] + back[k - n - 1], n) for n in range(1, k)]
        best = min(scores)
        ties += sum(s == best[0] for s, _ in scores) > 1
        want = (best[1], k - best[1])
        assert select_skip_indices(DistanceTable(front, back, 1), k) == want, (L, k)
    dt = time.perf_counter() - t0
    _report(record_property, "4 selection oracle", f"1000 tables match brute force ({ties} with ties)", dt, 10)
    assert ties > 100
    assert dt < 10


# ---------------------------------------------------------------------------
# 5


def _oracle_patch(s_min, s_max, T, d, t):
    raw = Fraction(s_min) + Fraction((s_max - s_min) * t, T)
    q = raw / d
    near = int(q + Fraction(1, 2))     # floor(q + 1/2): ties round up
    return min(max(near * d, s_min), s_max)


def test_5_patch_schedule_law(record_property):
    t0 = time.perf_counter()
    checked = 0
    for s_min, s_max, d in ((256, 512, 16), (64, 512, 8), (16, 64, 8), (32, 48, 16), (8, 1000, 8)):
        cfg = PatchPlannerConfig(s_min, s_max, 1000, d)
        sizes = [patch_size(cfg, t) for t in range(1001)]
        assert sizes[0] == s_min and sizes[-1] == s_max
        assert all(a <= b for a, b in zip(sizes, sizes[1:]))
        assert all(s % d == 0 and s_min <= s <= s_max for s in sizes)
        assert sizes == [_oracle_patch(s_min, s_max, 1000, d, t) for t in range(1001)]
        checked += len(sizes)
    dt = time.perf_counter() - t0
    _report(record_property, "5 patch schedule", f"{checked} timesteps exact, d in {{8, 16}}", dt)


# ---------------------------------------------------------------------------
# 6


def test_6_full_mask_text_independence(record_property):
    t0 = time.perf_counter()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cfg = _random_toy(rng)
        model = ToyDiT(cfg, seed)
        x = rng.standard_normal((1, cfg.n_img(), cfg.token_dim)).astype(np.float32)
        t = int(rng.integers(0, cfg.max_t + 1))
        ids_a = rng.integers(0, cfg.vocab, (1, cfg.n_text))
        ids_b = (ids_a + 1 + rng.integers(0, cfg.vocab - 1, ids_a.shape)) % cfg.vocab
        assert np.all(ids_a != ids_b)
        mask = MaskSpec.all(cfg.depth)
        a = model.forward(x, ids_a, t, mask)[0].data
        b = model.forward(x, ids_b, t, mask)[0].data
        assert a.tobytes() == b.tobytes(), seed
        assert model.forward(x, ids_a, t)[0].data.tobytes() != model.forward(x, ids_b, t)[0].data.tobytes()
    dt = time.perf_counter() - t0
    _report(record_property, "6 full-mask independence", "20 seeds bit-identical", dt, 10)
    assert dt < 10


# ---------------------------------------------------------------------------
# 7


def test_7_cost_model(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    for _ in range(10):
        cfg = _random_toy(rng)
        spec = ArchSpec.from_dit_config(cfg)
        k = int(rng.integers(1, cfg.depth))
        n = int(rng.integers(0, k + 1))
        plan = SkipPlan(n, k - n, cfg.depth)
        model = ToyDiT(cfg, 0)
        assert param_count(spec) == instantiated_count(model)
        model.drop_blocks(plan.skipped)
        inject(model, plan.resident, rank=3)
        assert param_count(spec, plan, rank=3) == instantiated_count(model)
        res = cfg.img_size
        assert flops_report(spec, res, None, "lora", 4)[0] == runtime_train_flops(cfg, "lora")
        assert flops_report(spec, res, None, "full_ft")[0] == runtime_train_flops(cfg, "full_ft")
        assert flops_report(spec, res, plan, rank=4) == (runtime_train_flops(cfg, "lora_blockskip", plan),
                                                         runtime_precompute_flops(cfg))
    flux = memory_report(load_preset("flux-like"), "lora", 512)
    gib, tflops = flux.param_bytes / GIB, flux.train_flops / 1e12
    dt = time.perf_counter() - t0
    _report(record_property, "7 cost model", f"10 toy configs exact; FLUX-like {gib:.2f} GiB "
            f"(22.84 +-10%), {tflops:.2f} TFLOPs (41.67 +-25%)", dt, 5)
    assert abs(gib - 22.84) / 22.84 < 0.10
    assert abs(tflops - 41.67) / 41.67 < 0.25
    assert dt < 5


# ---------------------------------------------------------------------------
# 8


def test_8_ablation_ordering(record_property, tmp_path):
    t0 = time.perf_counter()
    base, _ = pretrain_base(DiTConfig(), 600, seed=0, scene_size=64)
    save_checkpoint(base, tmp_path / "base")
    ds = synthetic_dataset(8, 64, 0)
    table = build_distance_table([load_checkpoint(tmp_path / "base")], ds.prompts[0],
                                 RandomConvEmbedder(0), steps=8, size=32, seed=0)
    cfg = TrainConfig(iterations=500, seed=0, skip_ratio=0.4)
    plain = train(load_checkpoint(tmp_path / "base"), ds, cfg, "plain").final_mean(50)
    res_m, plan = ablation_modes("selected", tmp_path / "base", ds, cfg, table)
    naive_m, plan2 = ablation_modes("skip_no_residual", tmp_path / "base", ds, cfg, table)
    residual, naive = res_m.final_mean(50), naive_m.final_mean(50)
    assert plan == plan2 and plan.k == 3
    dt = time.perf_counter() - t0
    _report(record_property, "8 ablation ordering",
            f"plan {plan.n}+{plan.m}: plain {plain:.4f}, residual {residual:.4f} "
            f"({residual / plain:.3f}x <= 1.2x), naive {naive:.4f} > residual", dt, 600)
    assert residual <= 1.2 * plain
    assert naive > residual
    assert dt < 600


# ---------------------------------------------------------------------------
# 9


def _pipeline(root: Path):
    run = str(root)
    for cmd in (["make-dataset"], ["select-blocks"], ["precompute"], ["train"],
                ["generate", "--count", "2"], ["eval"], ["plot"]):
        assert main([cmd[0], "--run", run, "--seed", "11", *cmd[1:]]) == 0, cmd
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "timings.json"}


def test_9_determinism_and_round_trip(record_property, tmp_path):
    t0 = time.perf_counter()
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    assert sorted(a) == sorted(b)
    differ = [k for k in a if a[k] != b[k]]
    assert not differ, differ
    for must in ("cache.dbsk", "metrics.csv", "plots/loss.svg", "plots/heatmap.svg",
                 "selection/distances.csv", "samples/sample_00.ppm"):
        assert must in a
    assert any(k.startswith("base/") for k in a) and any(k.startswith("adapters/") for k in a)

    run = tmp_path / "a"
    out = tmp_path / "again"
    out.mkdir()
    # residual cache
    cache = ResidualCache.read(run / "cache.dbsk")
    assert cache.to_bytes() == a["cache.dbsk"]
    # tensors inside checkpoints
    for f in sorted((run / "base").glob("*.tsr")):
        assert tsr.encode(tsr.decode(f.read_bytes())[0]) == f.read_bytes()
    # checkpoints
    save_checkpoint(load_checkpoint(run / "base"), out / "base")
    for f in (run / "base").iterdir():
        assert (out / "base" / f.name).read_bytes() == f.read_bytes(), f.name
    # images
    img = read_ppm(run / "samples" / "sample_00.ppm")
    write_ppm(out / "s.ppm", img)
    assert (out / "s.ppm").read_bytes() == a["samples/sample_00.ppm"]
    # CSVs
    assert DistanceTable.read(run / "selection" / "distances.csv").to_csv().encode() == \
        a["selection/distances.csv"]
    assert read_metrics(run / "metrics.csv").to_csv().encode() == a["metrics.csv"]
    dt = time.perf_counter() - t0
    _report(record_property, "9 determinism & round-trip",
            f"two pipelines, {len(a)} files bit-identical; formats round-trip", dt, 900)
    assert dt < 900
