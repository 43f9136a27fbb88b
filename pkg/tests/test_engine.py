import numpy as np
import pytest
from hypothesis import given, strategies as st

from cagan.engine import (DimensionError, LayerSpec, NoiseSpec, NumericError, OptimizerState,
                          ParameterError, Sequential, StateError, Tensor, UsageError, adam_step,
                          grad_check, functional as F)
from cagan.engine.gradcheck import sampled_relative_error, tensor_relative_error
from cagan.engine.tensor import log, relu, tsum

from gradcases import LAYER_CASES


def conv_reference(x, w, b):
    """Direct loop convolution with the same ceil-halving padding, in float64."""
    n, h, wd, c = x.shape
    f = w.shape[3]
    ho, wo = -(-h // 2), -(-wd // 2)
    pt = max((ho - 1) * 2 + 4 - h, 0) // 2
    pl = max((wo - 1) * 2 + 4 - wd, 0) // 2
    xp = np.zeros((n, 2 * ho + 2, 2 * wo + 2, c))
    xp[:, pt:pt + h, pl:pl + wd] = x
    out = np.zeros((n, ho, wo, f))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, 2 * i:2 * i + 4, 2 * j:2 * j + 4, :]
            out[:, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [0, 1, 2])) + b
    return out


# -- conv2d ------------------------------------------------------------------

@pytest.mark.parametrize("hw, filters, expected", [((32, 32, 3), 64, (16, 16, 64)),
                                                   ((224, 224, 3), 64, (112, 112, 64)),
                                                   ((7, 5, 2), 3, (4, 3, 3))])
def test_conv_output_shape(hw, filters, expected):
    x = Tensor(np.zeros((1,) + hw, np.float32))
    w = Tensor(np.zeros((4, 4, hw[2], filters), np.float32))
    out = F.conv2d(x, w, Tensor(np.zeros(filters, np.float32)))
    assert out.shape == (1,) + expected


def test_conv_zero_input_gives_zero(rng):
    x = Tensor(np.zeros((2, 8, 8, 3)))
    out = F.conv2d(x, Tensor(rng.standard_normal((4, 4, 3, 5))), Tensor(np.zeros(5)))
    assert np.all(out.data == 0)


@given(h=st.integers(1, 9), w=st.integers(1, 9), c=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_conv_matches_loop_reference(h, w, c, seed):
    r = np.random.default_rng(seed)
    x, k, b = r.standard_normal((2, h, w, c)), r.standard_normal((4, 4, c, 3)), r.standard_normal(3)
    out = F.conv2d(Tensor(x), Tensor(k), Tensor(b))
    np.testing.assert_allclose(out.data, conv_reference(x, k, b), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch_raises(rng):
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(rng.random((1, 8, 8, 3))), Tensor(rng.random((4, 4, 2, 5))), Tensor(np.zeros(5)))


def test_conv_spec_is_fixed():
    with pytest.raises(ParameterError):
        LayerSpec("conv2d", 8, kernel=3)


# -- batch norm --------------------------------------------------------------

def test_batch_norm_train_moments(rng):
    x = Tensor(rng.normal(3.0, 2.0, (4, 8, 8, 3)))
    state = F.BatchNormState(3, dtype=np.float64)
    out = F.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state).data
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-3)
    # brute-force oracle for the normalisation itself
    mu, var = x.data.mean(axis=(0, 1, 2)), x.data.var(axis=(0, 1, 2))
    np.testing.assert_allclose(out, (x.data - mu) / np.sqrt(var + 1e-5), rtol=1e-12)


def test_batch_norm_constant_channel_is_zero():
    x = Tensor(np.full((2, 3, 3, 1), 4.2))
    out = F.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), F.BatchNormState(1, dtype=np.float64))
    assert np.abs(out.data).max() < 1e-6


def test_batch_norm_standardized_input_is_identity(rng):
    # a +/-1 pattern per channel has zero mean and unit variance exactly; with
    # |x| = 1 the variance epsilon shifts values by about 5e-6
    raw = rng.permuted(np.repeat([[-1.0, 1.0]], 32, axis=0).reshape(64, 1, 1, 1), axis=0)
    raw = np.concatenate([raw, -raw], axis=-1).reshape(16, 2, 2, 2)
    out = F.batch_norm(Tensor(raw), Tensor(np.ones(2)), Tensor(np.zeros(2)), F.BatchNormState(2, dtype=np.float64))
    np.testing.assert_allclose(out.data, raw, rtol=0, atol=1e-5)


def test_batch_norm_eval_needs_statistics(rng):
    state = F.BatchNormState(2)
    with pytest.raises(StateError):
        F.batch_norm(Tensor(rng.random((2, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, mode="eval")


def test_batch_norm_running_stats_momentum(rng):
    state = F.BatchNormState(1, momentum=0.9, dtype=np.float64)
    a, b = rng.normal(0, 1, (5, 1)), rng.normal(2, 3, (5, 1))
    g, z = Tensor(np.ones(1)), Tensor(np.zeros(1))
    F.batch_norm(Tensor(a), g, z, state)
    F.batch_norm(Tensor(b), g, z, state)
    assert state.count == 2
    np.testing.assert_allclose(state.mean, 0.9 * a.mean() + 0.1 * b.mean())
    np.testing.assert_allclose(state.var, 0.9 * a.var(ddof=1) + 0.1 * b.var(ddof=1))
    out = F.batch_norm(Tensor(b), g, z, state, mode="eval").data
    np.testing.assert_allclose(out, (b - state.mean) / np.sqrt(state.var + 1e-5))


# -- dense, softmax, dropout ---------------------------------------------------

def test_dense_identity_and_bias(rng):
    x = rng.standard_normal((3, 4))
    out = F.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)
    out = F.dense(Tensor(x), Tensor(np.zeros((4, 2))), Tensor(np.array([1.5, -2.0])))
    assert np.all(out.data == [1.5, -2.0])


def test_dense_hand_multiply():
    x = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]])
    w = np.arange(12.0).reshape(3, 4)
    expected = [[sum(x[i, d] * w[d, u] for d in range(3)) for u in range(4)] for i in range(2)]
    np.testing.assert_array_equal(F.dense(Tensor(x), Tensor(w), Tensor(np.zeros(4))).data, expected)


def test_dense_mismatch_raises():
    with pytest.raises(DimensionError):
        F.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


def test_softmax_fixtures(rng):
    np.testing.assert_allclose(F.softmax(Tensor(np.zeros((1, 5)))).data, 0.2)
    out = F.softmax(Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)
    from mpmath import mp, exp, mpf
    mp.dps = 40
    row = rng.standard_normal(7) * 5
    denom = sum(exp(mpf(float(v))) for v in row)
    ref = [float(exp(mpf(float(v))) / denom) for v in row]
    np.testing.assert_allclose(F.softmax(Tensor(row[None])).data[0], ref, rtol=0, atol=1e-12)


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    out = F.softmax(Tensor(np.array([row]))).data
    assert abs(out.sum() - 1.0) <= 1e-9
    assert np.all((out >= 0) & (out <= 1))


def test_dropout_rate_zero_is_identity(rng):
    x = Tensor(rng.random((3, 4)))
    assert F.dropout(x, 0.0, rng) is x


def test_dropout_same_seed_same_mask():
    x = Tensor(np.ones((10, 10)))
    a = F.dropout(x, 0.5, np.random.default_rng(5)).data
    b = F.dropout(x, 0.5, np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_dropout_zero_fraction():
    out = F.dropout(Tensor(np.ones(100_000)), 0.5, np.random.default_rng(0)).data
    assert abs(np.mean(out == 0) - 0.5) < 0.01


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_bad_rate(rate):
    with pytest.raises(ParameterError):
        F.dropout(Tensor(np.ones(3)), rate, np.random.default_rng(0))
    with pytest.raises(ParameterError):
        NoiseSpec(rate=rate)


# -- autodiff ------------------------------------------------------------------

def test_backward_sum_and_square(rng):
    x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))
    x.grad = None
    (tsum(x * x) / 2.0).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_leaves_unused_params_untouched(rng):
    used = Tensor(rng.standard_normal(3), requires_grad=True)
    unused = Tensor(rng.standard_normal(3), requires_grad=True)
    tsum(used * used).backward()
    assert unused.grad is None and used.grad is not None


def test_backward_non_scalar_raises(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_composite_net_gradcheck_single_precision(rng):
    specs = [LayerSpec("conv2d", 3), LayerSpec("batch_norm"), LayerSpec("relu"), LayerSpec("flatten"),
             LayerSpec("dense", 4), LayerSpec("softmax")]
    net = Sequential(specs, (6, 6, 2), rng, dtype=np.float32)
    x = Tensor(rng.random((3, 6, 6, 2)).astype(np.float32))
    labels = np.array([0, 2, 3])

    def loss():
        out, _ = net.forward(x, track_stats=False)
        return -(log(out[np.arange(3), labels]).mean())

    assert grad_check(loss, net.named_parameters()) < 1e-3


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
@pytest.mark.parametrize("dtype, bound", [(np.float32, 1e-3), (np.float64, 1e-6)])
def test_layer_gradcheck(kind, dtype, bound):
    for seed in range(3):
        loss, params = LAYER_CASES[kind](np.random.default_rng(seed), dtype)
        assert grad_check(loss, params) < bound


def test_gradcheck_detects_corrupted_gradient(rng):
    loss, params = LAYER_CASES["dense"](rng, np.float64)
    for p in params.values():
        p.grad = None
    loss().backward()
    doubled = {k: 2 * p.grad for k, p in params.items()}
    err = grad_check(loss, params, analytic=doubled)
    assert err == pytest.approx(0.5, abs=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_eps_range_and_nonfinite(rng):
    loss, params = LAYER_CASES["dense"](rng, np.float64)
    with pytest.raises(ParameterError):
        grad_check(loss, params, eps=0.1)
    x = Tensor(np.array([-1.0]), requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: tsum(log(x)), {"x": x})


# -- adam ----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st_ = OptimizerState(learning_rate=0.1)
    adam_step({"p": p}, {"p": np.array([0.3, 0.3])}, st_)
    before, m_before = p.data.copy(), st_.m["p"].copy()
    adam_step({"p": p}, {"p": np.zeros(2)}, st_)
    assert st_.step == 2
    np.testing.assert_allclose(st_.m["p"], 0.9 * m_before)
    # the update is driven by the decayed first moment, not by the zero gradient
    assert np.all(np.sign(before - p.data) == np.sign(m_before))


def test_adam_zero_gradient_from_start_is_no_op():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adam_step({"p": p}, {"p": np.zeros(2)}, OptimizerState(learning_rate=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.01])
def test_adam_first_step_moves_by_lr(g):
    p = Tensor(np.array([0.5]), requires_grad=True)
    adam_step({"p": p}, {"p": np.array([g])}, OptimizerState(learning_rate=0.01))
    np.testing.assert_allclose(p.data, 0.5 - 0.01 * np.sign(g), rtol=1e-6)


def test_adam_reduces_quadratic():
    p = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    state = OptimizerState(learning_rate=0.1)
    f0 = float(np.sum(p.data ** 2))
    for _ in range(2):
        adam_step({"p": p}, {"p": 2 * p.data}, state)
    assert np.sum(p.data ** 2) < f0


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(DimensionError):
        adam_step({"p": p}, {"p": np.zeros(3)}, OptimizerState())


def test_adam_deterministic(rng):
    def run():
        r = np.random.default_rng(9)
        p = Tensor(r.standard_normal(5).astype(np.float32), requires_grad=True)
        s = OptimizerState()
        for _ in range(10):
            adam_step({"p": p}, {"p": r.standard_normal(5).astype(np.float32)}, s)
        return p.data
    assert run().tobytes() == run().tobytes()


# -- shape algebra ---------------------------------------------------------------

@given(h=st.integers(1, 12), c=st.integers(1, 3), depth=st.integers(1, 4), seed=st.integers(0, 999))
def test_declared_shapes_match_forward(h, c, depth, seed):
    r = np.random.default_rng(seed)
    specs = []
    for _ in range(depth):
        specs += [LayerSpec("conv2d", 2), LayerSpec("batch_norm"), LayerSpec("relu")]
    specs += [LayerSpec("flatten"), LayerSpec("dense", 3)]
    net = Sequential(specs, (h, h, c), r, dtype=np.float64)
    x = Tensor(r.random((2, h, h, c)))
    out, taps = net.forward(x, taps=tuple(range(len(specs))))
    for i, shape in enumerate(net.shapes):
        assert taps[i].shape[1:] == shape
    assert out.shape == (2, 3)


def test_gradcheck_skips_probes_across_a_kink():
    x = Tensor(np.array([3e-6, 1.0, -2.0]), requires_grad=True)
    w = Tensor(np.array([1.0, 2.0, 3.0]))

    def loss():
        return tsum(relu(x) * w)

    assert grad_check(loss, {"x": x}, eps=1e-5, skip_kinks=False) > 0.1
    err, details = grad_check(loss, {"x": x}, eps=1e-5, return_details=True)
    assert err < 1e-9 and details["x:kinks"] == 1


def test_richardson_cancels_second_order_error():
    x = Tensor(np.array([1.0, -0.5]), requires_grad=True)

    def loss():
        return tsum(x * x * x * x)

    central = grad_check(loss, {"x": x}, eps=1e-2)
    extrapolated = grad_check(loss, {"x": x}, eps=1e-2, scheme="richardson")
    assert central > 1e-5 and extrapolated < 1e-12
    with pytest.raises(ParameterError):
        grad_check(loss, {"x": x}, scheme="forward")


def test_sampled_estimate_matches_full_probe(rng):
    a = rng.standard_normal(50)
    n = a + 1e-3 * rng.standard_normal(50)
    full = sampled_relative_error(a, n, np.linalg.norm(a), 50)
    assert full == pytest.approx(tensor_relative_error(a, n), rel=1e-12)
    idx = rng.permutation(50)[:10]
    estimate = sampled_relative_error(a[idx], n[idx], np.linalg.norm(a), 50)
    assert 0.2 * full < estimate < 5 * full


def test_gradcheck_extended_precision_oracle(rng):
    loss, params = LAYER_CASES["batch_norm"](rng, np.float64)
    assert grad_check(loss, params, oracle_dtype=np.longdouble, scheme="richardson") < 1e-8
