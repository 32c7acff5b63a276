"""Sum/max fusion of two seeded models as the synthetic noise level rises.

    python scripts/fusion_noise_sweep.py --sigmas 0.05 2 4 8 --epochs 1

At the default noise both models saturate and fusion is trivially on par.
With heavy noise and short training the two models disagree, and averaging a
weaker model into a stronger one can cost accuracy.
"""
import argparse

import numpy as np

from convmixformer.data import SyntheticSpec, synthesize
from convmixformer.fusion import ProbabilityDistribution, fuse_accuracy
from convmixformer.model import ModelConfig
from convmixformer.training import TrainConfig, evaluate_arrays, train_arrays


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.05, 2.0, 4.0, 8.0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=1)
    args = ap.parse_args()
    cfg = ModelConfig(num_classes=4, num_stages=2, feature_dim=32, seq_len=16)
    print(f"{'sigma':>6} {'seed':>4} {'model A':>8} {'model B':>8} {'sum':>8} {'max':>8}")
    for sigma in args.sigmas:
        gaps = []
        for seed in range(args.seeds):
            spec = SyntheticSpec(noise_sigma=sigma, seed=seed)
            x, y, _ = synthesize(spec, "train")
            xt, yt, _ = synthesize(spec, "test")
            evs = [evaluate_arrays(train_arrays(cfg, TrainConfig(epochs=args.epochs, seed=1000 * seed + k), x, y)
                                   .state.params, cfg, xt, yt) for k in range(2)]
            samples = [([ProbabilityDistribution(ev.probs[i]) for ev in evs], int(yt[i])) for i in range(len(yt))]
            fused = {rule: fuse_accuracy(samples, rule) for rule in ("sum", "max")}
            gaps.append(fused["sum"] - max(ev.accuracy for ev in evs))
            print(f"{sigma:>6g} {seed:>4} {evs[0].accuracy:>8.3f} {evs[1].accuracy:>8.3f} "
                  f"{fused['sum']:>8.3f} {fused['max']:>8.3f}")
        print(f"{sigma:>6g}  min(sum - best single) = {np.min(gaps):+.3f}")


if __name__ == "__main__":
    main()
