"""Train the desk-scale model on three seeds and report train/test accuracy per seed.

    python scripts/desk_trainability.py --out runs/desk
"""

import argparse
import json
from pathlib import Path

from s3tformer.desk import desk_arrays, desk_model, desk_train, run_desk, seeded, summarize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=desk_train().epochs)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--out", default=None, help="directory for per-seed checkpoints and metrics")
    p.add_argument("--verbose", action="store_true")
    a = p.parse_args()
    arrays = desk_arrays(a.noise)
    log = (lambda r: print(f"  epoch {r['epoch']:3d} loss {r['train_loss']:.4f} train {r['train_acc']:.3f} "
                           f"test {r['val_acc']:.3f}", flush=True)) if a.verbose else None
    runs = []
    for s in (int(x) for x in a.seeds.split(",")):
        out = Path(a.out) / f"seed{s}" if a.out else None
        r = run_desk(*seeded(desk_model(), desk_train(epochs=a.epochs), s), arrays, out_dir=out, log=log)
        print(f"seed {s}: train {r.train_acc:.3f} test {r.test_acc:.3f} ({r.seconds:.0f}s)", flush=True)
        runs.append(r)
    print(json.dumps(summarize(runs)))


if __name__ == "__main__":
    main()
