"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import DeterminismError, UsageError
from .tensor import Tensor


def rel_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
) -> dict[str, float]:
    """Return the max relative error between analytic and numeric gradients.

    ``f`` rebuilds the graph from the current contents of ``params`` and
    returns a scalar tensor.  Tensors with more than ``max_coords`` entries
    are checked on a seeded random subset of coordinates.
    """
    if not 1e-7 <= h <= 1e-3:
        raise UsageError(f"step h={h} outside [1e-7, 1e-3]")
    if max_coords < 32:
        raise UsageError("at least 32 coordinates per tensor are required")

    first = f()
    second = f()
    if not np.array_equal(first.data, second.data):
        raise DeterminismError("two forward passes on identical inputs disagree")

    for p in params.values():
        p.zero_grad()
    f().backward()
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"parameter {name!r} received no gradient")
        analytic[name] = p.grad.copy()

    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        n = p.data.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for k, flat_idx in enumerate(coords):
            idx = np.unravel_index(flat_idx, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = f().data[0]
            p.data[idx] = orig - h
            down = f().data[0]
            p.data[idx] = orig
            numeric[k] = (up - down) / (2.0 * h)
        report[name] = float(rel_error(analytic[name].reshape(-1)[coords], numeric).max())
    return report


# --- standard suite ---------------------------------------------------------------------

def _leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    from . import ops

    return ops.sum_all(ops.mul(out, Tensor(weights)))


def _op_cases(rng):
    from . import ops

    cases = {}

    def projected(build, params, out_shape):
        weights = rng.standard_normal(out_shape)
        return (lambda: _weighted_sum(build(), weights)), params

    x = _leaf(rng, 2, 4, 5, 6)
    w, b = _leaf(rng, 3, 4, 3, 3), _leaf(rng, 3)
    cases["conv2d"] = projected(lambda: ops.conv2d(x, w, b, "same"), dict(x=x, w=w, b=b), (2, 3, 5, 6))
    wd, bd = _leaf(rng, 4, 1, 3, 1), _leaf(rng, 4)
    cases["conv2d_depthwise"] = projected(
        lambda: ops.conv2d(x, wd, bd, (1, 0), groups=4), dict(x=x, w=wd, b=bd), (2, 4, 5, 6))
    wp, bp = _leaf(rng, 5, 4, 1, 1), _leaf(rng, 5)
    cases["conv2d_pointwise"] = projected(lambda: ops.conv2d(x, wp, bp), dict(x=x, w=wp, b=bp), (2, 5, 5, 6))

    g4, b4 = _leaf(rng, 4), _leaf(rng, 4)
    cases["batchnorm_train"] = projected(
        lambda: ops.batchnorm(x, g4, b4, ops.BatchNormState(), "train"), dict(x=x, gamma=g4, beta=b4), (2, 4, 5, 6))
    stats = ops.BatchNormState(rng.standard_normal(4), rng.uniform(0.5, 2.0, 4))
    cases["batchnorm_eval"] = projected(
        lambda: ops.batchnorm(x, g4, b4, stats, "eval"), dict(x=x, gamma=g4, beta=b4), (2, 4, 5, 6))

    s = _leaf(rng, 3, 4, 6)
    g6, b6 = _leaf(rng, 6), _leaf(rng, 6)
    cases["layernorm"] = projected(lambda: ops.layernorm(s, g6, b6), dict(x=s, gamma=g6, beta=b6), (3, 4, 6))
    cases["gelu"] = projected(lambda: ops.gelu(s), dict(x=s), (3, 4, 6))
    wa, ba = _leaf(rng, 5, 6), _leaf(rng, 5)
    cases["affine"] = projected(lambda: ops.affine(s, wa, ba), dict(x=s, w=wa, b=ba), (3, 4, 5))
    cases["softmax"] = projected(lambda: ops.softmax(s), dict(x=s), (3, 4, 6))
    cases["mean_axis"] = projected(lambda: ops.mean_axis(s, 1), dict(x=s), (3, 6))
    cases["reshape_transpose"] = projected(
        lambda: ops.transpose(ops.reshape(s, (3, 24)), (1, 0)), dict(x=s), (24, 3))
    tok = _leaf(rng, 6)
    cases["add_mul_broadcast"] = projected(
        lambda: ops.mul(ops.add(s, tok), s), dict(x=s, token=tok), (3, 4, 6))
    logits = _leaf(rng, 5, 4)
    labels = rng.integers(0, 4, size=5)
    cases["cross_entropy"] = (lambda: ops.cross_entropy(logits, labels)), dict(logits=logits)
    return cases


def _model_case(rng, variant: str, mode: str):
    from . import ops
    from .model import ModelConfig, classify_logits, init_model

    config = ModelConfig(num_classes=3, num_stages=1, feature_dim=6, seq_len=5,
                         ffn_hidden=4, ffn_variant=variant)
    params = init_model(config, seed=int(rng.integers(1 << 30)))
    # move away from the zero/identity init so every parameter carries signal
    for _, t in params.named_tensors():
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    x = rng.standard_normal((4, config.seq_len, config.feature_dim))
    labels = rng.integers(0, config.num_classes, size=4)

    def loss():
        return ops.cross_entropy(classify_logits(x, params, config, mode), labels)

    checked = dict(params.named_tensors())
    if mode == "train":
        # batch statistics cancel the mixer bias: its true gradient is exactly 0,
        # which a relative-error test cannot resolve against roundoff
        for i in range(config.num_stages):
            del checked[f"stage{i}.mixer_b"]
    return loss, checked


def standard_suite(h: float = 1e-5, seed: int = 0, max_coords: int = 64) -> dict[str, float]:
    """Max relative error for every differentiable op and for 1-stage models."""
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng)
    for variant, tag in (("GDFN_LESS_BL3", "bl3"), ("GDFN_BL2", "bl2"), ("FFN_BL1", "bl1")):
        for mode in ("train", "eval"):
            cases[f"model_1stage_{tag}_{mode}"] = _model_case(rng, variant, mode)
    return {
        name: max(grad_check(f, params, h=h, max_coords=max_coords, seed=seed).values())
        for name, (f, params) in cases.items()
    }
