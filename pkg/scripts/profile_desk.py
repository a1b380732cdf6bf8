"""Train one desk-scale model, then write its energy report and firing-rate table through the CLI.

    python scripts/profile_desk.py --out runs/profile
"""

import argparse
from pathlib import Path

from s3tformer import checkpoint
from s3tformer.cli import main as cli
from s3tformer.data import synth_generate, write_skl
from s3tformer.desk import desk_arrays, desk_model, desk_spec, desk_train, run_desk, seeded


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=desk_train().epochs)
    p.add_argument("--out", default="runs/profile")
    a = p.parse_args()
    out = Path(a.out)
    run = run_desk(*seeded(desk_model(), desk_train(epochs=a.epochs), a.seed), desk_arrays(0.01), out_dir=out)
    print(f"trained: train {run.train_acc:.3f} test {run.test_acc:.3f}")
    write_skl(out / "desk.skl", synth_generate(desk_spec(0.01)))
    checkpoint.save(out / "final.ckpt", run.model)
    cli(["profile", "--ckpt", str(out / "final.ckpt"), "--data", str(out / "desk.skl"), "--subset", "test",
         "--out-dir", str(out)])
    print((out / "firing_rates.csv").read_text())


if __name__ == "__main__":
    main()
