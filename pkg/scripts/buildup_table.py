"""Progressive build-up table: six flag sets from all-off to the full model, mean test accuracy over seeds.

    python scripts/buildup_table.py --noise 0.05 --out runs/buildup.jsonl
"""

import argparse
import json

import numpy as np

from s3tformer.config import BUILDUP_STEPS, buildup_config
from s3tformer.data import atomic_write
from s3tformer.desk import desk_arrays, desk_model, desk_train, run_desk, seeded, summarize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", default=None, help="JSON-lines table")
    a = p.parse_args()
    arrays = desk_arrays(a.noise)
    seeds = [int(x) for x in a.seeds.split(",")]
    tcfg = desk_train(epochs=a.epochs, batch_size=a.batch_size)
    rows = []
    for step, on in BUILDUP_STEPS.items():
        mcfg = buildup_config(desk_model(), step)
        runs = [run_desk(*seeded(mcfg, tcfg, s), arrays) for s in seeds]
        row = {"step": step, "on": list(on), "arch_hash": mcfg.arch_hash(), **summarize(runs)}
        rows.append(row)
        accs = " ".join(f"{x:.3f}" for x in row["test_acc"])
        print(f"step {step} {'+'.join(on) or 'baseline':<16} mean {row['mean_test_acc']:.3f}  [{accs}]", flush=True)
    full, base = rows[-1]["mean_test_acc"], rows[0]["mean_test_acc"]
    print(f"full - baseline = {full - base:+.3f}")
    if a.out:
        atomic_write(a.out, "".join(json.dumps(r) + "\n" for r in rows))


if __name__ == "__main__":
    main()
