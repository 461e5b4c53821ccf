"""Finite-difference gradient cases shared by the op tests and the acceptance suite.

Each case builder returns ``(arrays, engine_fn, ref_fn)``: float64 input
arrays, the float32 engine computation over matching tensors, and a float64
closure recomputing the same output from ``arrays`` (so perturbing the arrays
in place moves the reference).
"""

import numpy as np

from demoe import tensor as T

import oracles as O


def _t(arr):
    return T.Tensor(arr.astype(np.float32), requires_grad=True)


def case_conv_pointwise(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(4, 3, 1, 1))
    b = rng.normal(size=(1, 4, 1, 1))
    arrays = [x, w, b]
    return (
        arrays,
        lambda ts: T.conv2d(ts[0], ts[1], ts[2], "pointwise_1x1"),
        lambda: O.ref_conv_pointwise(x, w, b),
    )


def case_conv_depthwise(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(3, 1, 3, 3))
    b = rng.normal(size=(1, 3, 1, 1))
    arrays = [x, w, b]
    return (
        arrays,
        lambda ts: T.conv2d(ts[0], ts[1], ts[2], "depthwise_3x3"),
        lambda: O.ref_conv_depthwise(x, w, b),
    )


def case_conv_depthwise_reflect(rng):
    x = rng.normal(size=(1, 2, 5, 4))
    w = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=(1, 2, 1, 1))
    arrays = [x, w, b]
    return (
        arrays,
        lambda ts: T.conv2d(ts[0], ts[1], ts[2], "depthwise_3x3", padding="reflect"),
        lambda: O.ref_conv_depthwise(x, w, b, padding="reflect"),
    )


def case_conv_down(rng):
    x = rng.normal(size=(2, 3, 4, 6))
    w = rng.normal(size=(5, 3, 2, 2))
    b = rng.normal(size=(1, 5, 1, 1))
    arrays = [x, w, b]
    return (
        arrays,
        lambda ts: T.conv2d(ts[0], ts[1], ts[2], "strided_2x2_down"),
        lambda: O.ref_conv_down(x, w, b),
    )


def case_layer_norm(rng):
    x = rng.normal(size=(2, 4, 3, 3))
    gamma = rng.normal(size=(1, 4, 1, 1))
    beta = rng.normal(size=(1, 4, 1, 1))
    arrays = [x, gamma, beta]
    return (
        arrays,
        lambda ts: T.layer_norm_channels(ts[0], ts[1], ts[2]),
        lambda: O.ref_layer_norm(x, gamma, beta),
    )


def case_simple_gate(rng):
    x = rng.normal(size=(2, 6, 3, 3))
    return [x], lambda ts: T.simple_gate(ts[0]), lambda: O.ref_simple_gate(x)


def case_sca(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(3, 3, 1, 1))
    b = rng.normal(size=(1, 3, 1, 1))
    arrays = [x, w, b]
    return (
        arrays,
        lambda ts: T.simplified_channel_attention(ts[0], ts[1], ts[2]),
        lambda: O.ref_sca(x, w, b),
    )


def case_global_avg_pool(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    return [x], lambda ts: T.global_avg_pool(ts[0]), lambda: O.ref_global_avg_pool(x)


def case_pixel_shuffle_up(rng):
    x = rng.normal(size=(2, 8, 3, 2))
    return [x], lambda ts: T.pixel_shuffle(ts[0], "up"), lambda: O.ref_pixel_shuffle_up(x)


def case_pixel_shuffle_down(rng):
    x = rng.normal(size=(2, 3, 4, 6))
    return [x], lambda ts: T.pixel_shuffle(ts[0], "down"), lambda: O.ref_pixel_shuffle_down(x)


def case_softmax_channels(rng):
    x = rng.normal(size=(3, 5, 1, 1))
    return [x], lambda ts: T.softmax_channels(ts[0]), lambda: O.ref_softmax_channels(x)


def case_add(rng):
    a = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=(2, 3, 3, 3))
    return [a, b], lambda ts: T.add(ts[0], ts[1]), lambda: a + b


def case_sub(rng):
    a = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=(2, 3, 3, 3))
    return [a, b], lambda ts: T.sub(ts[0], ts[1]), lambda: a - b


def case_mul_broadcast(rng):
    a = rng.normal(size=(2, 4, 3, 3))
    b = rng.normal(size=(1, 4, 1, 1))
    return [a, b], lambda ts: T.mul(ts[0], ts[1]), lambda: a * b


def case_scale(rng):
    x = rng.normal(size=(2, 3, 3, 3))
    c = float(rng.normal())
    return [x], lambda ts: T.scale(ts[0], c), lambda: x * np.float32(c)


def case_reduce_sum(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    return [x], lambda ts: T.reduce_sum(ts[0]), lambda: np.sum(x).reshape(1, 1, 1, 1)


def case_mean_abs_error(rng):
    # keep |a - b| >= 0.05 everywhere so the FD step never crosses the kink
    a = rng.normal(size=(2, 3, 4, 4))
    gap = np.sign(rng.normal(size=a.shape)) * (0.05 + np.abs(rng.normal(size=a.shape)))
    b = a + gap
    return (
        [a, b],
        lambda ts: T.mean_abs_error(ts[0], ts[1]),
        lambda: O.ref_mean_abs(a, b).reshape(1, 1, 1, 1),
    )


def case_nll_loss(rng):
    probs = rng.uniform(0.05, 1.0, size=(3, 5, 1, 1))
    labels = rng.integers(0, 5, size=3)
    return (
        [probs],
        lambda ts: T.nll_loss(ts[0], labels),
        lambda: O.ref_nll(probs, labels).reshape(1, 1, 1, 1),
    )


CASES = {
    "conv2d_pointwise_1x1": case_conv_pointwise,
    "conv2d_depthwise_3x3": case_conv_depthwise,
    "conv2d_depthwise_3x3_reflect": case_conv_depthwise_reflect,
    "conv2d_strided_2x2_down": case_conv_down,
    "layer_norm_channels": case_layer_norm,
    "simple_gate": case_simple_gate,
    "simplified_channel_attention": case_sca,
    "global_avg_pool": case_global_avg_pool,
    "pixel_shuffle_up": case_pixel_shuffle_up,
    "pixel_shuffle_down": case_pixel_shuffle_down,
    "softmax_channels": case_softmax_channels,
    "add": case_add,
    "sub": case_sub,
    "mul_broadcast": case_mul_broadcast,
    "scale": case_scale,
    "reduce_sum": case_reduce_sum,
    "mean_abs_error": case_mean_abs_error,
    "nll_loss": case_nll_loss,
}


def run_case(builder, rng, step=1e-3):
    """Returns the worst relative error between analytic and FD gradients."""
    arrays, engine_fn, ref_fn = builder(rng)
    out_shape = ref_fn().shape
    r = rng.normal(size=out_shape)
    tensors = [_t(a) for a in arrays]
    with T.Tape() as tape:
        out = engine_fn(tensors)
        loss = T.reduce_sum(T.mul(out, T.constant(r.astype(np.float32))))
    T.backward(tape, loss)
    fd = O.fd_gradients(lambda: float(np.sum(ref_fn() * r)), arrays, step=step)
    return max(O.rel_err(t.grad, g) for t, g in zip(tensors, fd))
