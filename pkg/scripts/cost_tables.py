"""Memory / FLOPs tables for the bundled presets and the toy model.

Full-resolution full fine-tuning and LoRA rows, then block-skip rows at
ratios 0.3 / 0.4 / 0.5 trained at half resolution (patch sampling).

    python3 scripts/cost_tables.py --out cost_tables
"""

import argparse
from pathlib import Path

from ditbs.costmodel import ArchSpec, csv_table, load_preset, markdown_table, memory_report
from ditbs.model import DiTConfig
from ditbs.skip import SkipPlan, compute_k

SETUPS = {"flux-like": 512, "sana-like": 1024, "toy": 64}


def reports(spec, res, ratios=(0.3, 0.4, 0.5)):
    out = [memory_report(spec, s, res) for s in ("full_ft", "lora")]
    for r in ratios:
        k = compute_k(r, spec.depth)
        out.append(memory_report(spec, "lora_blockskip", res // 2,
                                 SkipPlan(k // 2, k - k // 2, spec.depth)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=None, help="directory for .md and .csv files")
    a = ap.parse_args()
    for name, res in SETUPS.items():
        spec = ArchSpec.from_dit_config(DiTConfig()) if name == "toy" else load_preset(name)
        reps = reports(spec, res)
        md = f"## {name}\n\n{spec.note}\n\n" + markdown_table(reps)
        print(md)
        if a.out:
            a.out.mkdir(parents=True, exist_ok=True)
            (a.out / f"{name}.md").write_text(md)
            (a.out / f"{name}.csv").write_text(csv_table(reps))


if __name__ == "__main__":
    main()
