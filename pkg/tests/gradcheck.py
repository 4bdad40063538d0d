"""Shared gradient-checking harness.

Every check compares reverse-mode gradients against central finite
differences computed by an independent oracle that re-evaluates the
function; the oracle never inspects the recorded graph.
"""

import numpy as np

from pacmac import tensor as T


def rel_error(a, b):
    denom = max(np.abs(b).max(), 1e-8) if b.size else 1.0
    return np.abs(a - b).max() / denom


def check_grad(f, x, h=1e-5, tol=1e-5):
    """Assert autodiff gradient of scalar f(x) matches finite differences."""
    leaf = T.parameter(np.array(x.values if isinstance(x, T.Tensor) else x,
                                dtype=np.float64))
    out = f(leaf)
    T.backward(out)
    fd = T.finite_difference_gradient(f, leaf, h=h)
    err = rel_error(leaf.grad, fd.values)
    assert err < tol, f"gradient mismatch: rel error {err:.3e} >= {tol:g}"
    return err


def random_tensor(rng, max_rank=2, max_extent=8, low=-2.0, high=2.0, shape=None):
    if shape is None:
        rank = rng.integers(1, max_rank + 1)
        shape = tuple(int(rng.integers(1, max_extent + 1)) for _ in range(rank))
    return T.Tensor(rng.uniform(low, high, size=shape))


def primitive_cases(rng):
    """One randomly-shaped scalarized closure per primitive kind.

    Returns a list of (name, f, x0) where f maps a Tensor to a tracked
    scalar through the primitive under test.
    """
    cases = []

    n = int(rng.integers(1, 6))
    m = int(rng.integers(1, 6))
    k = int(rng.integers(1, 6))

    other = rng.uniform(-2, 2, size=(n, m))
    cases.append(("add", lambda x: T.mean(T.add(x, T.constant(other))),
                  random_tensor(rng, shape=(n, m))))
    bias = rng.uniform(-2, 2, size=(m,))
    cases.append(("add_bias", lambda x: T.mean(T.add(x, T.constant(bias))),
                  random_tensor(rng, shape=(n, m))))
    cases.append(("mul", lambda x: T.mean(T.mul(x, T.constant(other))),
                  random_tensor(rng, shape=(n, m))))
    rhs = rng.uniform(-2, 2, size=(m, k))
    cases.append(("matmul", lambda x: T.mean(T.matmul(x, T.constant(rhs))),
                  random_tensor(rng, shape=(n, m))))
    lhs = rng.uniform(-2, 2, size=(n, m))
    cases.append(("matmul_rhs", lambda x: T.mean(T.matmul(T.constant(lhs), x)),
                  random_tensor(rng, shape=(m, k))))
    stack_rhs = rng.uniform(-2, 2, size=(2, m, k))
    cases.append(("matmul_stacked",
                  lambda x: T.mean(T.matmul(x, T.constant(stack_rhs))),
                  random_tensor(rng, shape=(2, n, m))))

    probe = rng.uniform(-2, 2, size=(n, m))
    cases.append(("softmax_rows",
                  lambda x: T.mean(T.mul(T.softmax_rows(x), T.constant(probe))),
                  random_tensor(rng, shape=(n, m))))

    d = max(m, 2)
    gain = rng.uniform(0.5, 1.5, size=(d,))
    bias_ln = rng.uniform(-0.5, 0.5, size=(d,))
    probe_ln = rng.uniform(-2, 2, size=(n, d))
    cases.append(("layer_norm",
                  lambda x: T.mean(T.mul(
                      T.layer_norm(x, T.constant(gain), T.constant(bias_ln)),
                      T.constant(probe_ln))),
                  random_tensor(rng, shape=(n, d))))
    cases.append(("layer_norm_gain",
                  lambda g: T.mean(T.layer_norm(
                      T.constant(probe_ln), g, T.constant(bias_ln))),
                  T.Tensor(gain)))

    cases.append(("gelu", lambda x: T.mean(T.gelu(x)), random_tensor(rng, shape=(n, m))))

    c = int(rng.integers(2, 6))
    targets = rng.integers(0, c, size=n)
    ls = float(rng.uniform(0, 0.3))
    cases.append(("cross_entropy",
                  lambda x: T.cross_entropy_from_logits(x, targets, label_smoothing=ls),
                  random_tensor(rng, shape=(n, c))))
    w = rng.uniform(0, 1, size=n)
    cases.append(("cross_entropy_weighted",
                  lambda x: T.cross_entropy_from_logits(x, targets, weights=w),
                  random_tensor(rng, shape=(n, c))))

    tgt = rng.uniform(-2, 2, size=(n, m))
    msk = (rng.uniform(size=(n,)) < 0.7).astype(float)
    if msk.sum() == 0:
        msk[0] = 1.0
    cases.append(("mse_masked",
                  lambda x: T.mse_masked(x, T.constant(tgt), mask=msk),
                  random_tensor(rng, shape=(n, m))))

    probe_t = rng.uniform(-2, 2, size=(m, n))
    cases.append(("transpose",
                  lambda x: T.mean(T.mul(T.transpose(x), T.constant(probe_t))),
                  random_tensor(rng, shape=(n, m))))
    cases.append(("reshape",
                  lambda x: T.mean(T.mul(T.reshape(x, (m, n)), T.constant(probe_t))),
                  random_tensor(rng, shape=(n, m))))
    cases.append(("mean_axis",
                  lambda x: T.mean(T.mul(T.mean(x, axis=0), T.constant(bias))),
                  random_tensor(rng, shape=(n, m))))
    cases.append(("scale", lambda x: T.mean(T.scale(x, 1.7)),
                  random_tensor(rng, shape=(n, m))))

    other2 = rng.uniform(-2, 2, size=(n, m))
    probe_c = rng.uniform(-2, 2, size=(2 * n, m))
    cases.append(("concat",
                  lambda x: T.mean(T.mul(T.concat([x, T.constant(other2)], axis=0),
                                         T.constant(probe_c))),
                  random_tensor(rng, shape=(n, m))))
    if n > 1:
        probe_s = rng.uniform(-2, 2, size=(n - 1, m))
        cases.append(("slice",
                      lambda x: T.mean(T.mul(T.slice_axis(x, 0, 1, n),
                                             T.constant(probe_s))),
                      random_tensor(rng, shape=(n, m))))

    cases.append(("log", lambda x: T.mean(T.log(x)),
                  random_tensor(rng, shape=(n, m), low=0.1, high=2.0)))
    return cases
