"""Parameter and MAC report for the default encoder, its FFN ablations, and a vanilla stage.

    python scripts/param_report.py [--json out.json]
"""
import argparse
import json

from convmixformer.cli import count_report
from convmixformer.model import ModelConfig, ablation_configs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--json", default=None, help="also write the full report here")
    args = ap.parse_args()
    base = ModelConfig()
    full = {name: count_report(cfg) for name, cfg in ablation_configs(base).items()}
    vanilla = full["BL3"]["vanilla_stage"]["stage_total"]
    print(f"{'variant':<8}{'stage params':>14}{'total params':>14}{'total MACs':>16}{'vs vanilla':>12}")
    for name, rep in full.items():
        p, m = rep["params"], rep["macs"]
        print(f"{name:<8}{p['stage_total']:>14,}{p['total']:>14,}{m['total']:>16,}{p['stage_total'] / vanilla:>12.4f}")
    print(f"{'vanilla':<8}{vanilla:>14,}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(full, fh, indent=2)


if __name__ == "__main__":
    main()
