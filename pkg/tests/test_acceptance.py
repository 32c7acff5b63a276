"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""
import math
import sys
import time
from pathlib import Path

import numpy as np

from convmixformer import ops
from convmixformer.checkpoint import load_checkpoint, save_checkpoint
from convmixformer.data import FeatureSequence, SyntheticSpec, read_features, synthesize, write_features
from convmixformer.fusion import ProbabilityDistribution, align_scores, fuse_accuracy, late_fuse, read_scores
from convmixformer.gradcheck import standard_suite
from convmixformer.model import (
    FFNVariant,
    ModelConfig,
    ablation_configs,
    count_params,
    count_params_vanilla,
    gdfn_forward,
    init_model,
    stage_forward,
)
from convmixformer.training import TrainConfig, cross_entropy, evaluate_arrays, lr_at_epoch, train_arrays

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
TASK = ModelConfig(num_classes=4, num_stages=2, feature_dim=32, seq_len=16)


def report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    sys.__stdout__.write(line + "\n")
    sys.__stdout__.flush()
    return ok


def randomize(params, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    for _, t in params.named_tensors():
        t.data = t.data + scale * rng.standard_normal(t.shape)
    return params


def check_gradients():
    start = time.perf_counter()
    errors = standard_suite(h=1e-5, seed=0, max_coords=64)
    seconds = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and seconds < 120 and any(k.startswith("model_1stage") for k in errors)
    return report(1, "gradient fidelity", ok,
                  f"{len(errors)} cases, max rel error {errors[worst]:.2e} ({worst}), {seconds:.1f}s")


def conv_case(r, kind):
    n = int(r.integers(1, 3))
    h, w = int(r.integers(3, 7)), int(r.integers(3, 7))
    if kind == "dense":
        groups, c_in, c_out = 1, int(r.integers(1, 4)), int(r.integers(1, 4))
        kh, kw = int(r.choice([3, 5])), int(r.choice([1, 3]))
    elif kind == "depthwise":
        c_in = int(r.integers(2, 5))
        groups, c_out = c_in, c_in * int(r.integers(1, 3))
        kh, kw = int(r.choice([3, 5])), int(r.choice([1, 3]))
    else:  # pointwise
        groups, c_in, c_out = 1, int(r.integers(1, 5)), int(r.integers(1, 5))
        kh, kw = 1, 1
    x = r.standard_normal((n, c_in, h, w))
    wt = r.standard_normal((c_out, c_in // groups, kh, kw))
    return x, wt, r.standard_normal(c_out), (kh // 2, kw // 2), groups


def check_conv_oracle():
    r = np.random.default_rng(2024)
    worst, kinds = 0.0, ("dense", "depthwise", "pointwise")
    for i in range(100):
        x, w, b, pad, groups = conv_case(r, kinds[i % 3])
        got = ops.conv2d(x, w, b, pad, groups).data
        worst = max(worst, float(np.abs(got - oracles.conv2d_loops(x, w, b, pad, groups)).max()))
    return report(2, "conv2d vs loop oracle", worst <= 1e-9, f"100 cases, max abs diff {worst:.1e}")


def check_stage_wiring():
    worst = 0.0
    for variant in FFNVariant:
        cfg = ModelConfig(num_classes=3, num_stages=1, feature_dim=8, seq_len=6, class_token="none",
                          ffn_variant=variant)
        stage = randomize(init_model(cfg, 1), 2).stages[0]
        for name, t in stage.named_tensors():
            if not name.startswith(("norm_", "mixer_bn_")):
                t.data = np.zeros_like(t.data)
        x = np.random.default_rng(3).standard_normal((2, 6, 8))
        got = stage_forward(x, stage, cfg, "train").data
        want = oracles.layernorm_loops(x, stage.norm_gamma.data, stage.norm_beta.data, cfg.ln_eps)
        worst = max(worst, float(np.abs(got - want).max()))
    return report(3, "stage wiring (dead branches give layernorm)", worst <= 1e-12, f"max abs diff {worst:.1e}")


def check_gate():
    cfg = ModelConfig(num_classes=3, num_stages=1, feature_dim=4, seq_len=5, ffn_hidden=3)
    stage = randomize(init_model(cfg, 0), 4).stages[0]
    p = np.random.default_rng(5).standard_normal((2, 5, 4))
    for name in ("pw1_b", "dw1_b", "pw2_b", "dw2_b", "proj_b"):
        getattr(stage, name).data = np.zeros_like(getattr(stage, name).data)
    zero_ok = not gdfn_forward(np.zeros_like(p), stage, cfg).data.any()
    closed = randomize(init_model(cfg, 0), 4).stages[0]
    for name in ("pw2_w", "pw2_b", "dw2_w", "dw2_b", "proj_b"):
        getattr(closed, name).data = np.zeros_like(getattr(closed, name).data)
    gate_ok = not gdfn_forward(p, closed, cfg).data.any()
    worst = 0.0
    for seed in range(5):
        for variant in ("GDFN_LESS_BL3", "GDFN_BL2"):
            c = cfg.replace(ffn_variant=variant)
            s = randomize(init_model(c, seed), 10 + seed).stages[0]
            x = np.random.default_rng(seed).standard_normal((1, 5, 4))
            want = oracles.gdfn_loops(x, s, c.branch_width, c.dwconv_kernel)
            worst = max(worst, float(np.abs(gdfn_forward(x, s, c).data - want).max()))
    ok = zero_ok and gate_ok and worst <= 1e-9
    return report(4, "gated FFN semantics", ok,
                  f"zero input -> 0: {zero_ok}, closed gate -> 0: {gate_ok}, oracle max diff {worst:.1e}")


def check_accounting():
    r = np.random.default_rng(7)
    mismatches = 0
    for _ in range(50):
        ch = int(r.choice([1, 2, 4]))
        cfg = ModelConfig(
            num_classes=int(r.integers(2, 30)), num_stages=int(r.integers(1, 4)),
            feature_dim=ch * int(r.integers(1, 20)), seq_len=int(r.integers(1, 12)),
            mixer_kernel=(int(r.choice([1, 3, 5])), int(r.choice([1, 3]))), mixer_channels=ch,
            ffn_variant=str(r.choice([v.value for v in FFNVariant])),
            ffn_hidden=int(r.integers(1, 48)), class_token=str(r.choice(["additive", "none"])),
            dwconv_kernel=int(r.choice([1, 3, 5])))
        mismatches += count_params(cfg)["total"] != init_model(cfg, 0).num_params()
    base = ModelConfig()
    ratio = count_params(base)["stage_total"] / count_params_vanilla(base)["stage_total"]
    stage = {k: count_params(c)["stage_total"] for k, c in ablation_configs(base).items()}
    ordering = stage["BL1"] > stage["BL3"] and stage["BL2"] > stage["BL3"]
    ok = mismatches == 0 and ratio < 0.5 and ordering
    return report(5, "parameter accounting", ok,
                  f"fuzz mismatches {mismatches}/50, stage ratio {ratio:.4f}, "
                  f"BL1 {stage['BL1']:,} BL2 {stage['BL2']:,} BL3 {stage['BL3']:,}")


def check_learning():
    spec = SyntheticSpec()
    x, y, _ = synthesize(spec, "train")
    xt, yt, _ = synthesize(spec, "test")
    params = init_model(TASK, 0)
    seen = {}

    def on_epoch(m):
        seen["epoch"] = m.epoch
        seen["acc"] = evaluate_arrays(params, TASK, xt, yt).accuracy
        return seen["acc"] >= 0.95

    start = time.perf_counter()
    train_arrays(TASK, TrainConfig(epochs=300), x, y, params=params, on_epoch=on_epoch)
    seconds = time.perf_counter() - start
    frozen = init_model(TASK, 0)
    before = [t.data.tobytes() for _, t in frozen.named_tensors()]
    train_arrays(TASK, TrainConfig(epochs=2, lr=0.0), x, y, params=frozen)
    frozen_ok = before == [t.data.tobytes() for _, t in frozen.named_tensors()]
    ok = seen["acc"] >= 0.95 and seconds < 600 and frozen_ok
    return report(6, "learning capability", ok,
                  f"test accuracy {seen['acc']:.3f} after {seen['epoch'] + 1} epochs in {seconds:.1f}s; "
                  f"lr=0 params unchanged: {frozen_ok}")


def check_fusion():
    gaps = []
    for seed in range(5):
        spec = SyntheticSpec(seed=seed)
        x, y, _ = synthesize(spec, "train")
        xt, yt, _ = synthesize(spec, "test")
        probs, accs = [], []
        for k in range(2):
            res = train_arrays(TASK, TrainConfig(epochs=3, seed=1000 * seed + k), x, y)
            ev = evaluate_arrays(res.state.params, TASK, xt, yt)
            probs.append(ev.probs)
            accs.append(ev.accuracy)
        samples = [([ProbabilityDistribution(p[i], tag) for p, tag in zip(probs, ("color", "depth"))], int(yt[i]))
                   for i in range(len(yt))]
        gaps.append(fuse_accuracy(samples, "sum") - max(accs))
    color = read_scores(FIXTURES / "fusion_color.scores")
    depth = read_scores(FIXTURES / "fusion_depth.scores")
    aligned = align_scores([color, depth])
    fixture_ok = (
        [late_fuse(d, "sum").aggregate_scores.tolist() for d, _ in aligned]
        == [[1.125, 0.5, 0.375], [0.625, 0.875, 0.5], [0.875, 0.375, 0.75]]
        and fuse_accuracy(aligned, "sum") == 2 / 3
        and late_fuse([ProbabilityDistribution([0.6, 0.4]), ProbabilityDistribution([0.1, 0.9])]).predicted == 1
    )
    ok = min(gaps) >= -0.01 and fixture_ok
    return report(7, "late fusion", ok,
                  f"fused minus best single over 5 seeds: min {min(gaps):+.3f}; fixtures exact: {fixture_ok}")


def check_protocol():
    cfg = TrainConfig()
    lrs = [lr_at_epoch(cfg, e) for e in (0, 50, 75)]
    lr_ok = all(math.isclose(a, b, rel_tol=1e-12) for a, b in zip(lrs, (1e-4, 1e-5, 1e-6)))
    worst = max(abs(cross_entropy(np.zeros((4, n)), list(range(4))).data[0] - math.log(n)) for n in (4, 25, 83))
    ok = lr_ok and worst <= 1e-12
    return report(8, "protocol defaults", ok, f"lr at 0/50/75 = {lrs}; uniform CE vs ln n max diff {worst:.1e}")


def check_io(tmp):
    tmp = Path(tmp)
    rng = np.random.default_rng(11)
    cmf_ok = True
    for i in range(10):
        seq = FeatureSequence(rng.standard_normal((int(rng.integers(1, 20)), int(rng.integers(1, 40)))), i % 4)
        write_features(seq, tmp / "a.cmf")
        back = read_features(tmp / "a.cmf", num_classes=4)
        write_features(back, tmp / "b.cmf")
        cmf_ok &= (tmp / "a.cmf").read_bytes() == (tmp / "b.cmf").read_bytes()
    spec = SyntheticSpec(samples_per_class=5, test_samples_per_class=5)
    x, y, _ = synthesize(spec, "train")
    xt, yt, _ = synthesize(spec, "test")
    params = train_arrays(TASK, TrainConfig(epochs=2), x, y).state.params
    save_checkpoint(params, tmp / "m.cmfc")
    loaded = load_checkpoint(tmp / "m.cmfc", TASK)
    save_checkpoint(loaded, tmp / "n.cmfc")
    ckpt_ok = (tmp / "m.cmfc").read_bytes() == (tmp / "n.cmfc").read_bytes()
    eval_ok = evaluate_arrays(loaded, TASK, xt, yt).probs.tobytes() == evaluate_arrays(params, TASK, xt, yt).probs.tobytes()
    ok = cmf_ok and ckpt_ok and eval_ok
    return report(9, "bit-exact I/O", ok,
                  f"CMF1 round trips {cmf_ok}, checkpoint round trip {ckpt_ok}, save-load-evaluate {eval_ok}")


def test_criterion_1_gradient_fidelity():
    assert check_gradients()


def test_criterion_2_conv_oracle():
    assert check_conv_oracle()


def test_criterion_3_stage_wiring():
    assert check_stage_wiring()


def test_criterion_4_gate_semantics():
    assert check_gate()


def test_criterion_5_parameter_accounting():
    assert check_accounting()


def test_criterion_6_learning():
    assert check_learning()


def test_criterion_7_fusion():
    assert check_fusion()


def test_criterion_8_protocol_defaults():
    assert check_protocol()


def test_criterion_9_bit_exact_io(tmp_path):
    assert check_io(tmp_path)


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        results = [check_gradients(), check_conv_oracle(), check_stage_wiring(), check_gate(), check_accounting(),
                   check_learning(), check_fusion(), check_protocol(), check_io(d)]
    sys.exit(0 if all(results) else 1)
