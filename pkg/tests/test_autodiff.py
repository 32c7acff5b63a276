import numpy as np
import pytest

from convmixformer import ops
from convmixformer.errors import DeterminismError, GraphError, UsageError
from convmixformer.gradcheck import grad_check, rel_error, standard_suite
from convmixformer.model import ModelConfig, classify_logits, init_model
from convmixformer.tensor import Node, Tensor, backward, trace


def leaf(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=True)


def test_sum_gives_ones():
    x = leaf((3, 4))
    ops.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_product_rule():
    x, y = leaf((5,), 1), leaf((5,), 2)
    ops.sum_all(ops.mul(x, y)).backward()
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_fan_out_accumulates():
    x = leaf((2, 3))
    ops.add(ops.sum_all(x), ops.sum_all(x)).backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))


def test_operator_sugar_and_broadcast_grad():
    x, tok = leaf((2, 3, 4)), leaf((4,), 3)
    ops.sum_all(x * (x + tok)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + tok.data)
    np.testing.assert_allclose(tok.grad, x.data.sum(axis=(0, 1)))


def test_non_scalar_loss_is_usage_error():
    with pytest.raises(UsageError):
        backward(ops.mul(leaf((3,)), 2.0))


def test_constant_loss_is_usage_error():
    with pytest.raises(UsageError):
        backward(ops.sum_all(Tensor([1.0, 2.0])))


def test_trace_is_topological():
    x, y = leaf((3,)), leaf((3,), 1)
    z = ops.sum_all(ops.mul(ops.add(x, y), x))
    graph = trace(z)
    pos = {id(t): i for i, t in enumerate(graph.nodes)}
    for t in graph.nodes:
        if t.node is not None:
            for p in t.node.parents:
                assert pos[id(p)] < pos[id(t)]
    assert len(graph.nodes) == len({id(t) for t in graph.nodes})
    ops_ = [op for op, _ in graph.records()]
    assert ops_.count("leaf") == 2 and ops_[-1] == "sum"


def test_cycle_detected():
    x = leaf((2,))
    a = ops.mul(x, 2.0)
    b = ops.add(a, 1.0)
    # splice a cycle in by hand; ops can never build one
    a.node = Node("mul", (x, b), a.node.backward)
    with pytest.raises(GraphError):
        trace(ops.sum_all(b))


def test_grad_check_detects_nondeterminism():
    x = leaf((4,))
    r = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        grad_check(lambda: ops.sum_all(ops.mul(x, r.standard_normal(4))), {"x": x})


def test_grad_check_rejects_bad_step():
    x = leaf((4,))
    with pytest.raises(UsageError):
        grad_check(lambda: ops.sum_all(x), {"x": x}, h=1e-2)


def test_grad_check_catches_a_wrong_gradient():
    x = leaf((6,))

    def bad_square():
        def bw(g):
            return (g * x.data,)  # should be 2 * x
        return ops.sum_all(Tensor._from_op(x.data ** 2, "square", (x,), bw))

    report = grad_check(bad_square, {"x": x})
    assert report["x"] > 0.3


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert rel_error(2.0, 1.0) == pytest.approx(0.5)


def test_affine_gradcheck():
    x, w, b = leaf((3, 4)), leaf((2, 4), 1), leaf((2,), 2)
    wts = np.random.default_rng(3).standard_normal((3, 2))
    r = grad_check(lambda: ops.sum_all(ops.mul(ops.affine(x, w, b), wts)), dict(x=x, w=w, b=b))
    assert max(r.values()) < 1e-6


def test_gelu_chain_gradcheck():
    x = leaf((4, 5))
    wts = np.random.default_rng(4).standard_normal((4, 5))
    r = grad_check(lambda: ops.sum_all(ops.mul(ops.gelu(ops.gelu(ops.mul(x, 1.5))), wts)), {"x": x})
    assert r["x"] < 1e-5


def test_batchnorm_train_gradcheck():
    x, g, b = leaf((3, 2, 4, 3)), leaf((2,), 1), leaf((2,), 2)
    wts = np.random.default_rng(5).standard_normal((3, 2, 4, 3))
    r = grad_check(
        lambda: ops.sum_all(ops.mul(ops.batchnorm(x, g, b, ops.BatchNormState(), "train"), wts)),
        dict(x=x, gamma=g, beta=b),
    )
    assert max(r.values()) < 1e-4


def test_standard_suite_all_ops_below_tolerance():
    report = standard_suite()
    for name in ("conv2d", "conv2d_depthwise", "batchnorm_train", "layernorm", "gelu", "affine",
                 "softmax", "mean_axis", "cross_entropy", "model_1stage_bl3_eval", "model_1stage_bl3_train"):
        assert name in report
    bad = {k: v for k, v in report.items() if not v < 1e-4}
    assert not bad, bad


def test_mixer_bias_gradient_vanishes_under_batch_statistics():
    # the one coordinate the train-mode suite excludes: batch norm removes any
    # constant shift, so d(loss)/d(mixer bias) is exactly zero up to roundoff
    config = ModelConfig(num_classes=3, num_stages=1, feature_dim=6, seq_len=5, ffn_hidden=4)
    params = init_model(config, seed=3)
    rng = np.random.default_rng(0)
    for _, t in params.named_tensors():
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    x = rng.standard_normal((4, 5, 6))
    ops.cross_entropy(classify_logits(x, params, config, "train"), [0, 1, 2, 0]).backward()
    assert np.abs(params.stages[0].mixer_b.grad).max() < 1e-14
    for _, t in params.named_tensors():
        t.zero_grad()
    ops.cross_entropy(classify_logits(x, params, config, "eval"), [0, 1, 2, 0]).backward()
    assert np.abs(params.stages[0].mixer_b.grad).max() > 1e-6
