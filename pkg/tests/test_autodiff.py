import math

import numpy as np
import pytest

from warpkit import autodiff as ad
from warpkit.autodiff import Tensor


def test_softmax_symmetry():
    p = ad.softmax(Tensor([0.0, 0.0]))
    assert np.allclose(p.data, [0.5, 0.5])
    assert abs(p.data.sum() - 1.0) < 1e-6


def test_softmax_two_class_oracle():
    # scalar oracle: e / (e + 1)
    expected = math.e / (math.e + 1.0)
    p = ad.softmax(Tensor([1.0, 0.0]))
    assert abs(p.data[0] - expected) < 1e-6
    assert abs(p.data[1] - (1.0 - expected)) < 1e-6


def test_softmax_single_class():
    p = ad.softmax(Tensor([3.7]))
    assert np.allclose(p.data, [1.0])


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        ad.softmax(Tensor([np.nan, 0.0]))
    with pytest.raises(ValueError):
        ad.softmax(Tensor([np.inf, 0.0]))


def test_softmax_large_logits_stable():
    p = ad.softmax(Tensor([1000.0, 999.0]))
    assert np.isfinite(p.data).all()
    assert abs(p.data.sum() - 1.0) < 1e-6


def test_cross_entropy_uniform():
    loss = ad.cross_entropy(Tensor([0.0, 0.0]), 0)
    assert abs(loss.item() - math.log(2.0)) < 1e-6


def test_cross_entropy_oracle():
    # -ln(e / (e + 1))
    expected = -math.log(math.e / (math.e + 1.0))
    loss = ad.cross_entropy(Tensor([1.0, 0.0]), 0)
    assert abs(loss.item() - expected) < 1e-6


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = Tensor([0.0, 0.0], requires_grad=True)
    loss = ad.cross_entropy(logits, 0)
    loss.backward()
    assert np.allclose(logits.grad, [-0.5, 0.5])


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor([0.0, 0.0]), 2)
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor([0.0, 0.0]), -1)


def test_finite_difference_quadratic():
    w = Tensor(np.array(3.0, dtype=np.float64), requires_grad=True)

    def loss_fn():
        m = ad.reshape(w, (1, 1))
        return ad.reshape(ad.matmul(m, m), ())

    err = ad.finite_difference_check(loss_fn, [w], eps=1e-5)
    assert err < 1e-8
    assert abs(w.grad - 6.0) < 1e-9


def test_finite_difference_constant_loss():
    # constant loss: analytic and numeric gradients are both zero
    w = Tensor(np.array([1.0, 2.0], dtype=np.float64), requires_grad=True)
    c = Tensor(np.array(5.0, dtype=np.float64))
    err = ad.finite_difference_check(lambda: ad.scale(c, 1.0), [w], eps=1e-4)
    assert err == 0.0


def test_finite_difference_rejects_nondeterministic_loss():
    w = Tensor(np.array(1.0, dtype=np.float64), requires_grad=True)
    rng = np.random.default_rng(0)

    def noisy():
        return ad.scale(Tensor(np.float64(rng.standard_normal())), 1.0)

    with pytest.raises(ValueError):
        ad.finite_difference_check(noisy, [w])


def test_finite_difference_rejects_float32():
    w = Tensor(np.array(1.0, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        ad.finite_difference_check(lambda: ad.scale(w, 1.0), [w])


def _random_tensor(rng, shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=np.float64)


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    a = _random_tensor(rng, (3, 4))
    b = _random_tensor(rng, (4, 2))

    def loss_fn():
        out = ad.matmul(a, b)
        return ad.reshape(ad.matmul(ad.reshape(out, (1, 6)), ad.reshape(out, (6, 1))), ())

    assert ad.finite_difference_check(loss_fn, [a, b]) < 1e-4


def test_batched_matmul_gradients():
    rng = np.random.default_rng(8)
    a = _random_tensor(rng, (2, 3, 4))
    w = _random_tensor(rng, (4, 3))

    def loss_fn():
        out = ad.matmul(a, w)
        flat = ad.reshape(out, (1, out.size))
        return ad.reshape(ad.matmul(flat, ad.transpose(flat, (1, 0))), ())

    assert ad.finite_difference_check(loss_fn, [a, w]) < 1e-4


def test_layer_norm_gradients():
    rng = np.random.default_rng(9)
    x = _random_tensor(rng, (2, 5))
    gamma = _random_tensor(rng, (5,))
    beta = _random_tensor(rng, (5,))

    def loss_fn():
        out = ad.layer_norm(x, gamma, beta)
        flat = ad.reshape(out, (1, out.size))
        return ad.reshape(ad.matmul(flat, ad.transpose(flat, (1, 0))), ())

    assert ad.finite_difference_check(loss_fn, [x, gamma, beta]) < 1e-4


def test_gelu_gradients():
    rng = np.random.default_rng(10)
    x = _random_tensor(rng, (4, 3))

    def loss_fn():
        out = ad.gelu(x)
        flat = ad.reshape(out, (1, out.size))
        return ad.reshape(ad.matmul(flat, ad.transpose(flat, (1, 0))), ())

    assert ad.finite_difference_check(loss_fn, [x]) < 1e-4


def test_softmax_gradients():
    rng = np.random.default_rng(11)
    x = _random_tensor(rng, (3, 4))
    w = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)

    def loss_fn():
        p = ad.softmax(x)
        weighted = ad.matmul(ad.reshape(p, (1, 12)), ad.transpose(ad.reshape(w, (1, 12)), (1, 0)))
        return ad.reshape(weighted, ())

    assert ad.finite_difference_check(loss_fn, [x]) < 1e-4


def test_mixed_embed_gradients_flow_to_prompt_and_weights():
    rng = np.random.default_rng(12)
    weights = _random_tensor(rng, (6, 3))
    prompt = _random_tensor(rng, (2, 3))
    ids = np.array([[0, 1, 2, 0], [3, 0, 4, 5]])
    placements = [(0, 3, 0), (1, 1, 1)]

    def loss_fn():
        out = ad.mixed_embed(weights, ids, prompt, placements)
        flat = ad.reshape(out, (1, out.size))
        return ad.reshape(ad.matmul(flat, ad.transpose(flat, (1, 0))), ())

    assert ad.finite_difference_check(loss_fn, [weights, prompt]) < 1e-4


def test_mixed_embed_scatters_only_to_gathered_rows():
    weights = Tensor(np.eye(5, dtype=np.float64), requires_grad=True)
    ids = np.array([[1, 3]])
    out = ad.mixed_embed(weights, ids, None, [])
    loss = ad.reshape(ad.matmul(ad.reshape(out, (1, 10)), ad.reshape(out, (10, 1))), ())
    loss.backward()
    touched = {i for i in range(5) if np.any(weights.grad[i] != 0)}
    assert touched <= {1, 3}


def test_mixed_embed_rejects_out_of_range_ids():
    weights = Tensor(np.eye(3))
    with pytest.raises(IndexError):
        ad.mixed_embed(weights, np.array([[0, 5]]), None, [])


def test_gather_bt_and_pool_rows_gradients():
    rng = np.random.default_rng(13)
    x = _random_tensor(rng, (2, 4, 3))
    w = rng.random((2, 4))

    def loss_fn():
        picked = ad.gather_bt(x, [(0, 1), (1, 3)])
        pooled = ad.pool_rows(x, w)
        both = ad.add(picked, pooled)
        flat = ad.reshape(both, (1, both.size))
        return ad.reshape(ad.matmul(flat, ad.transpose(flat, (1, 0))), ())

    assert ad.finite_difference_check(loss_fn, [x]) < 1e-4


def test_add_rejects_non_suffix_broadcast():
    a = Tensor(np.zeros((2, 3, 4)))
    b = Tensor(np.zeros((2, 1, 4)))
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_add_suffix_broadcast_gradient():
    rng = np.random.default_rng(14)
    x = _random_tensor(rng, (2, 3, 4))
    bias = _random_tensor(rng, (4,))

    def loss_fn():
        out = ad.add(x, bias)
        flat = ad.reshape(out, (1, out.size))
        return ad.reshape(ad.matmul(flat, ad.transpose(flat, (1, 0))), ())

    assert ad.finite_difference_check(loss_fn, [x, bias]) < 1e-4


def test_gradients_accumulate_on_reuse():
    x = Tensor(np.array([[2.0]], dtype=np.float64), requires_grad=True)
    out = ad.add(x, x)
    loss = ad.reshape(out, ())
    loss.backward()
    assert np.allclose(x.grad, [[2.0]])


def test_non_trainable_tensors_keep_no_grad():
    frozen = Tensor(np.ones((2, 2), dtype=np.float64))
    live = Tensor(np.ones((2, 2), dtype=np.float64), requires_grad=True)
    out = ad.matmul(frozen, live)
    loss = ad.reshape(ad.matmul(ad.reshape(out, (1, 4)), ad.reshape(out, (4, 1))), ())
    loss.backward()
    assert frozen.grad is None
    assert live.grad is not None


def test_no_grad_blocks_graph_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.scale(x, 2.0)
    assert out.requires_grad is False
    assert out._parents == ()


def test_forward_determinism():
    rng = np.random.default_rng(15)
    a = Tensor(rng.standard_normal((8, 8)))
    b = Tensor(rng.standard_normal((8, 8)))
    one = ad.matmul(a, b).data.tobytes()
    two = ad.matmul(a, b).data.tobytes()
    assert one == two


def test_collect_trainable_leaves():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)))
    c = Tensor(np.ones((2, 2)), requires_grad=True)
    out = ad.matmul(ad.add(a, b), c)
    loss = ad.reshape(ad.matmul(ad.reshape(out, (1, 4)), ad.reshape(out, (4, 1))), ())
    leaves = ad.collect_trainable_leaves(loss)
    assert {id(t) for t in leaves} == {id(a), id(c)}


def test_global_norm_clip():
    a = Tensor(np.zeros(3), requires_grad=True)
    a.grad = np.array([3.0, 4.0, 0.0], dtype=np.float32)
    norm = ad.global_norm_clip([a], 1.0)
    assert abs(norm - 5.0) < 1e-6
    assert abs(np.linalg.norm(a.grad) - 1.0) < 1e-6
    # norms already below the cap are untouched
    b = Tensor(np.zeros(2), requires_grad=True)
    b.grad = np.array([0.3, 0.4], dtype=np.float32)
    ad.global_norm_clip([b], 1.0)
    assert np.allclose(b.grad, [0.3, 0.4])
