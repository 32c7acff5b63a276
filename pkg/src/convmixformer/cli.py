"""Command-line entry point.

Settings come from three layers, later ones winning: built-in defaults, a
JSON run-config file (``--config PATH``; ``--config default`` means the
built-ins), and ``--section.key`` flags.  The run-config file has the
sections ``model``, ``train``, ``synthetic`` and ``paths``; every key must
appear in ``SECTIONS`` or the file is rejected.

Exit statuses: 0 success, 1 usage/config error, 2 data/format error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import load_checkpoint
from .data import MODALITIES, SyntheticSpec, gen_synthetic, read_manifest
from .errors import ConfigError, ConvMixError, DataError, DimensionError, NumericError, UsageError
from .fusion import RULES, align_scores, fuse_accuracy, read_scores
from .gradcheck import standard_suite
from .model import FFNVariant, ModelConfig, ablation_configs, count_macs, count_params, count_params_vanilla
from .training import TrainConfig, evaluate, train

logger = logging.getLogger("convmixformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    train_manifest: Optional[str] = None  # None -> <data_dir>/train.manifest
    test_manifest: Optional[str] = None  # None -> <data_dir>/test.manifest
    checkpoint: str = "run/model.cmfc"
    metrics_log: str = "run/metrics.log"
    scores: str = "run/scores.txt"
    modality: str = "synthetic"

    def validate(self) -> None:
        if self.modality not in MODALITIES:
            raise ConfigError(f"paths.modality must be one of {MODALITIES}")

    def train_manifest_path(self) -> Path:
        return Path(self.train_manifest or Path(self.data_dir) / "train.manifest")

    def test_manifest_path(self) -> Path:
        return Path(self.test_manifest or Path(self.data_dir) / "test.manifest")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synthetic": SyntheticSpec, "paths": PathsConfig}

FIELD_HELP = {
    "model.num_classes": "number of gesture classes n",
    "model.num_stages": "number of encoder stages",
    "model.feature_dim": "per-frame feature width D",
    "model.seq_len": "frames per sample T",
    "model.mixer_kernel": "token-mixer kernel as 'kT,kD' (odd)",
    "model.mixer_channels": "token-mixer channels; must divide D",
    "model.ffn_variant": "feed-forward block",
    "model.ffn_hidden": "hidden width of the FFN (default D)",
    "model.class_token": "class-token embedding after the mixer",
    "model.dwconv_kernel": "depthwise kernel length along T (odd)",
    "model.bn_eps": "batch-norm epsilon",
    "model.ln_eps": "layer-norm epsilon",
    "model.bn_momentum": "batch-norm running-stat momentum",
    "train.batch_size": "samples per optimizer step",
    "train.epochs": "training epochs",
    "train.lr": "initial Adam learning rate",
    "train.lr_decay_epochs": "comma-separated epochs where lr is multiplied by the decay factor",
    "train.lr_decay_factor": "lr multiplier at each decay epoch",
    "train.beta1": "Adam beta1",
    "train.beta2": "Adam beta2",
    "train.adam_eps": "Adam epsilon",
    "train.weight_decay": "decoupled weight decay (0 disables)",
    "train.seed": "seed for initialization and shuffling",
    "train.shuffle": "shuffle samples every epoch (true/false)",
    "synthetic.n_classes": "classes to generate",
    "synthetic.seq_len": "frames per generated sample",
    "synthetic.feature_dim": "feature width of generated samples",
    "synthetic.samples_per_class": "training samples per class",
    "synthetic.test_samples_per_class": "test samples per class",
    "synthetic.noise_sigma": "std of additive Gaussian noise",
    "synthetic.seed": "generator seed",
    "paths.data_dir": "dataset directory (gen-data output, manifest default)",
    "paths.train_manifest": "training manifest (default <data_dir>/train.manifest)",
    "paths.test_manifest": "evaluation manifest (default <data_dir>/test.manifest)",
    "paths.checkpoint": "checkpoint file (train writes, eval reads)",
    "paths.metrics_log": "per-epoch metrics log written by train",
    "paths.scores": "probability scores written by eval",
    "paths.modality": "modality tag written into the scores file",
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple:
    text = text.strip()
    return tuple(int(t) for t in text.split(",")) if text else ()


def _field_kind(cls, f: dataclasses.Field):
    """Converter from CLI text, plus allowed choices, for one schema field."""
    if f.name == "ffn_variant":
        return str, [v.value for v in FFNVariant]
    if f.name == "class_token":
        return str, ["additive", "none"]
    if f.name == "modality":
        return str, list(MODALITIES)
    default = f.default
    if isinstance(default, bool):
        return _parse_bool, None
    if isinstance(default, tuple):
        return _parse_int_list, None
    if isinstance(default, int):
        return int, None
    if isinstance(default, float):
        return float, None
    if default is None:
        return (int if "int" in str(f.type) else str), None
    return str, None


def _coerce_json(section: str, f: dataclasses.Field, value):
    """Type-check a value that came from the JSON file."""
    conv, choices = _field_kind(SECTIONS[section], f)
    key = f"{section}.{f.name}"
    if value is None and f.default is None:
        return None
    if conv is _parse_int_list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be a list of integers")
        return tuple(value)
    if conv is _parse_bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if conv is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} must be an integer")
        return value
    if conv is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    if choices and value not in choices:
        raise ConfigError(f"{key} must be one of {choices}")
    return value


def load_run_config(path: Optional[str]) -> dict:
    """Read and schema-check a run-config file into per-section override dicts."""
    out = {name: {} for name in SECTIONS}
    if path is None or path == "default":
        return out
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for section, values in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section {section!r}; expected {sorted(SECTIONS)}")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
        for key, value in values.items():
            if key not in fields:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            out[section][key] = _coerce_json(section, fields[key], value)
    return out


def build_section(section: str, file_values: dict, args: argparse.Namespace):
    cls = SECTIONS[section]
    values = dict(file_values.get(section, {}))
    for f in dataclasses.fields(cls):
        flag_value = getattr(args, f"{section}.{f.name}", None)
        if flag_value is not None:
            values[f.name] = flag_value
    try:
        obj = cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_section_flags(parser: argparse.ArgumentParser, section: str) -> None:
    cls = SECTIONS[section]
    group = parser.add_argument_group(f"{section} settings")
    for f in dataclasses.fields(cls):
        key = f"{section}.{f.name}"
        conv, choices = _field_kind(cls, f)
        default = f.default
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else getattr(default, "value", default)
        group.add_argument(
            f"--{key}", dest=key, type=conv, choices=choices, default=None, metavar=key.split(".")[1].upper(),
            help=f"{FIELD_HELP[key]} (default: {shown})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convmixformer", description="ConvMixFormer encoder: data, training, evaluation, fusion, accounting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", default="default", help="JSON run-config file, or 'default' for built-ins")

    p = sub.add_parser("gen-data", help="generate a synthetic feature dataset")
    with_config(p)
    _add_section_flags(p, "synthetic")
    _add_section_flags(p, "paths")

    p = sub.add_parser("train", help="train a model; writes checkpoint and metrics log")
    with_config(p)
    for s in ("model", "train", "paths"):
        _add_section_flags(p, s)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes a scores file")
    with_config(p)
    _add_section_flags(p, "model")
    _add_section_flags(p, "paths")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("fuse", help="late-fuse score files and print an accuracy table")
    p.add_argument("scores", nargs="+", help="scores files, one per modality")
    p.add_argument("--rule", choices=RULES, default="sum", help="aggregation rule (default: sum)")
    p.add_argument("--manifest", default=None, help="take labels from this manifest instead of the score rows")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("count", help="parameter and MAC breakdown with vanilla-transformer ratio")
    with_config(p)
    _add_section_flags(p, "model")
    p.add_argument("--batch", type=int, default=1, help="batch size for MAC counting (default: 1)")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step (default: 1e-05)")
    p.add_argument("--seed", type=int, default=0, help="seed for inputs and coordinate sampling (default: 0)")
    p.add_argument("--max-coords", type=int, default=64, help="coordinates checked per tensor (default: 64)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    return parser


# --- subcommands -------------------------------------------------------------------------

def cmd_gen_data(args, cfg, out) -> int:
    spec = build_section("synthetic", cfg, args)
    paths = build_section("paths", cfg, args)
    manifests = gen_synthetic(spec, paths.data_dir)
    for split, m in manifests.items():
        print(f"{split}: {len(m)} samples -> {Path(paths.data_dir) / f'{split}.manifest'}", file=out)
    return EXIT_OK


def cmd_train(args, cfg, out) -> int:
    model_cfg = build_section("model", cfg, args)
    train_cfg = build_section("train", cfg, args)
    paths = build_section("paths", cfg, args)
    manifest = read_manifest(paths.train_manifest_path())
    for p in (paths.checkpoint, paths.metrics_log):
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    result = train(model_cfg, train_cfg, manifest, paths.checkpoint, paths.metrics_log)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"epochs {len(result.metrics)} loss {last.loss:.6f} train_accuracy {last.accuracy:.4f}", file=out)
    print(f"checkpoint {paths.checkpoint}", file=out)
    print(f"metrics {paths.metrics_log}", file=out)
    return EXIT_OK


def cmd_eval(args, cfg, out) -> int:
    model_cfg = build_section("model", cfg, args)
    paths = build_section("paths", cfg, args)
    manifest = read_manifest(paths.test_manifest_path())
    params = load_checkpoint(paths.checkpoint, model_cfg)
    Path(paths.scores).parent.mkdir(parents=True, exist_ok=True)
    result = evaluate(params, model_cfg, manifest, paths.scores, paths.modality)
    if args.json:
        json.dump({"accuracy": result.accuracy, "confusion": result.confusion.tolist(),
                   "num_samples": len(result.rows), "scores": paths.scores}, out)
        out.write("\n")
    else:
        print(f"accuracy {result.accuracy:.6f} ({len(result.rows)} samples)", file=out)
        print("confusion (rows = true class, columns = predicted):", file=out)
        for row in result.confusion:
            print("  " + " ".join(f"{v:5d}" for v in row), file=out)
        print(f"scores {paths.scores}", file=out)
    return EXIT_OK


def _column_names(paths: Sequence[str], tables) -> list[str]:
    tags = [t[0].dist.modality if t else Path(p).stem for p, t in zip(paths, tables)]
    if len(set(tags)) == len(tags):
        return tags
    return [f"{tag}:{Path(p).stem}" for tag, p in zip(tags, paths)]


def cmd_fuse(args, cfg, out) -> int:
    tables = [read_scores(p) for p in args.scores]
    labels = None
    if args.manifest:
        m = read_manifest(args.manifest)
        labels = {r.sample_id: r.label for r in m.samples}
    names = _column_names(args.scores, tables)
    rows = []
    k = len(tables)
    for size in range(1, k + 1):
        for subset in itertools.combinations(range(k), size):
            aligned = align_scores([tables[i] for i in subset], labels)
            rows.append({"inputs": [names[i] for i in subset], "accuracy": fuse_accuracy(aligned, args.rule)})
    if args.json:
        json.dump({"rule": args.rule, "columns": names, "rows": rows}, out)
        out.write("\n")
        return EXIT_OK
    width = max(len(n) for n in names)
    print(f"late fusion, rule={args.rule}", file=out)
    print("#  " + "  ".join(n.rjust(width) for n in names) + "  accuracy", file=out)
    for r in rows:
        marks = "  ".join(("x" if n in r["inputs"] else ".").rjust(width) for n in names)
        print(f"{len(r['inputs'])}  {marks}  {100 * r['accuracy']:.2f}%", file=out)
    return EXIT_OK


def count_report(model_cfg: ModelConfig, batch: int = 1) -> dict:
    params = count_params(model_cfg)
    macs = count_macs(model_cfg, batch)
    vanilla = count_params_vanilla(model_cfg)
    ablation = {name: count_params(c)["stage_total"] for name, c in ablation_configs(model_cfg).items()}
    return {
        "config": model_cfg.to_dict(),
        "params": params,
        "macs": macs,
        "vanilla_stage": vanilla,
        "stage_ratio": params["stage_total"] / vanilla["stage_total"],
        "ablation_stage_params": ablation,
    }


def cmd_count(args, cfg, out) -> int:
    model_cfg = build_section("model", cfg, args)
    if args.batch < 1:
        raise UsageError("--batch must be >= 1")
    rep = count_report(model_cfg, args.batch)
    if args.json:
        json.dump(rep, out)
        out.write("\n")
        return EXIT_OK
    p, m, v = rep["params"], rep["macs"], rep["vanilla_stage"]
    c = model_cfg
    print(f"model: {c.num_stages} stages, T={c.seq_len}, D={c.feature_dim}, n={c.num_classes}, "
          f"ffn={c.ffn_variant.value} (hidden {c.ffn_hidden})", file=out)
    print("parameters per stage:", file=out)
    for k, n in p["per_stage"].items():
        print(f"  {k:<16}{n:>14,}", file=out)
    print(f"  {'stage total':<16}{p['stage_total']:>14,}", file=out)
    print(f"classifier params {p['classifier']:,}", file=out)
    print(f"total params {p['total']:,}", file=out)
    print(f"MACs per stage (batch {args.batch}):", file=out)
    for k, n in m["per_stage"].items():
        print(f"  {k:<16}{n:>14,}", file=out)
    print(f"classifier MACs {m['classifier']:,}", file=out)
    print(f"total MACs {m['total']:,}", file=out)
    print(f"vanilla transformer stage params {v['stage_total']:,} "
          f"(attention {v['mha']:,}, mlp {v['mlp']:,}, norms {v['norms']:,})", file=out)
    ratio = rep["stage_ratio"]
    print(f"ratio mixer-stage/vanilla-stage {ratio:.4f} ({'<' if ratio < 0.5 else '>='} 0.5)", file=out)
    print("ablation stage params: " + ", ".join(f"{k} {n:,}" for k, n in rep["ablation_stage_params"].items()),
          file=out)
    return EXIT_OK


def cmd_gradcheck(args, cfg, out) -> int:
    if not 1e-7 <= args.h <= 1e-3:
        raise UsageError("--h must lie in [1e-7, 1e-3]")
    report = standard_suite(h=args.h, seed=args.seed, max_coords=args.max_coords)
    ok = all(v < GRADCHECK_TOLERANCE for v in report.values())
    if args.json:
        json.dump({"h": args.h, "tolerance": GRADCHECK_TOLERANCE, "max_rel_error": report, "passed": ok}, out)
        out.write("\n")
    else:
        for name, err in report.items():
            print(f"{name:<28}{err:.3e}  {'ok' if err < GRADCHECK_TOLERANCE else 'FAIL'}", file=out)
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "count": cmd_count,
    "gradcheck": cmd_gradcheck,
}


def run(argv: Optional[Sequence[str]] = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        handler = logging.StreamHandler(err)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
        logger.setLevel(logging.DEBUG)
    try:
        cfg = load_run_config(getattr(args, "config", None))
        return COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE
    except (DataError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=err)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=err)
        return EXIT_NUMERIC
    except ConvMixError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
