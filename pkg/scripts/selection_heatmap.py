"""Masking distance table and skip choices for a freshly pretrained base.

Writes distances.csv and heatmap.svg, and prints the (n, m) chosen for
every skip budget k.

    python3 scripts/selection_heatmap.py --out selection_out --base-steps 300
"""

import argparse
from pathlib import Path

from ditbs.blockselect import RandomConvEmbedder, build_distance_table, select_skip_indices
from ditbs.data import synthetic_dataset
from ditbs.model import DiTConfig
from ditbs.plots import heatmap_svg, write_svg
from ditbs.train import pretrain_base


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("selection_out"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--base-steps", type=int, default=600)
    ap.add_argument("--models", type=int, default=1, help="bases pretrained with seeds seed..seed+N-1")
    ap.add_argument("--steps", type=int, default=8, help="sampling steps per image")
    a = ap.parse_args()
    cfg = DiTConfig()
    models = [pretrain_base(cfg, a.base_steps, seed=a.seed + j)[0] for j in range(a.models)]
    prompt = synthetic_dataset(1, 64, a.seed).prompts[0]
    table = build_distance_table(models, prompt, RandomConvEmbedder(a.seed), a.steps, 32, a.seed)
    a.out.mkdir(parents=True, exist_ok=True)
    table.write(a.out / "distances.csv")
    write_svg(a.out / "heatmap.svg", heatmap_svg(table))
    print("n  front      back")
    for i, (f, b) in enumerate(zip(table.front, table.back), start=1):
        print(f"{i:<2d} {f:.6f}  {b:.6f}")
    for k in range(2, cfg.depth):
        print(f"k={k}: (n, m) = {select_skip_indices(table, k)}")


if __name__ == "__main__":
    main()
