"""Desk-scale experiment: generate data, train two seeded models, evaluate, fuse.

    python scripts/run_synthetic.py --out runs/synthetic --epochs 30

Each model plays one pseudo-modality; the script prints the per-model and
fused accuracies in the same subset-table form as ``convmixformer fuse``.
"""
import argparse
import io
from pathlib import Path

from convmixformer.cli import run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    data = out / "data"

    def step(*argv):
        buf = io.StringIO()
        code = run([str(a) for a in argv], out=buf)
        print(buf.getvalue(), end="")
        if code:
            raise SystemExit(code)

    step("gen-data", "--config", "configs/desk.json", "--paths.data_dir", data,
         "--synthetic.noise_sigma", args.noise, "--synthetic.seed", args.seed)
    scores = []
    for k, modality in enumerate(("color", "depth")):
        run_dir = out / modality
        common = ["--config", "configs/desk.json", "--paths.data_dir", data,
                  "--paths.checkpoint", run_dir / "model.cmfc", "--paths.scores", run_dir / "scores.txt"]
        step("train", *common, "--paths.metrics_log", run_dir / "metrics.log",
             "--train.epochs", args.epochs, "--train.seed", 1000 * args.seed + k)
        step("eval", *common, "--paths.modality", modality)
        scores.append(run_dir / "scores.txt")
    for rule in ("sum", "max"):
        step("fuse", *scores, "--rule", rule)


if __name__ == "__main__":
    main()
