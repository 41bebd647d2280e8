"""Desk-scale skip ablation: plain LoRA vs skipping with and without residuals.

Pretrains a base model on procedural scenes, builds the masking distance
table, then fine-tunes on the 8-image synthetic subject set in every mode
and prints the mean loss over the last 50 iterations.

    python3 scripts/ablation.py --out ablation_out
"""

import argparse
import time
from pathlib import Path

from ditbs.blockselect import RandomConvEmbedder, build_distance_table
from ditbs.data import synthetic_dataset
from ditbs.model import DiTConfig, load_checkpoint, save_checkpoint
from ditbs.plots import loss_curve_svg, write_svg
from ditbs.train import ABLATIONS, TrainConfig, ablation_modes, pretrain_base, train


def run(out: Path, seed=0, base_steps=600, iterations=500, ratio=0.4, log=print):
    out.mkdir(parents=True, exist_ok=True)
    mcfg = DiTConfig()
    t0 = time.perf_counter()
    base, _ = pretrain_base(mcfg, base_steps, seed=seed, scene_size=64)
    save_checkpoint(base, out / "base")
    log(f"pretrained base in {time.perf_counter() - t0:.1f}s")
    ds = synthetic_dataset(8, 64, seed)
    table = build_distance_table([load_checkpoint(out / "base")], ds.prompts[0],
                                 RandomConvEmbedder(seed), steps=8, size=32, seed=seed)
    table.write(out / "distances.csv")
    cfg = TrainConfig(iterations=iterations, seed=seed, skip_ratio=ratio)
    results, series = {}, {}
    plain = train(load_checkpoint(out / "base"), ds, cfg, "plain")
    results["plain"] = ("0+0", plain.final_mean())
    series["plain"] = plain.iteration_losses()
    for mode in ABLATIONS:
        m, plan = ablation_modes(mode, out / "base", ds, cfg, table)
        results[mode] = (f"{plan.n}+{plan.m}", m.final_mean())
        series[mode] = m.iteration_losses()
        log(f"{mode:18s} plan {plan.n}+{plan.m} final50 {m.final_mean():.4f}")
    lines = ["mode,plan,final50_loss"] + [f"{k},{p},{v!r}" for k, (p, v) in results.items()]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    write_svg(out / "ablation.svg", loss_curve_svg(series, "ablation: per-iteration loss"))
    log(f"total {time.perf_counter() - t0:.1f}s")
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("ablation_out"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--base-steps", type=int, default=600)
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--ratio", type=float, default=0.4)
    a = ap.parse_args()
    res = run(a.out, a.seed, a.base_steps, a.iterations, a.ratio)
    for mode, (plan, loss) in res.items():
        print(f"{mode:18s} {plan:5s} {loss:.4f}")


if __name__ == "__main__":
    main()
