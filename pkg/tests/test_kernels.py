import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dact import kernels
from dact._accel import DISABLE_ENV, HAVE_NUMBA

nb = lambda k: kernels.implementation("numba", k)
npk = lambda k: kernels.implementation("numpy", k)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=finite))
def test_digitize_agrees(values):
    edges = np.array([-10.0, -1.0, 0.0, 0.5, 3.0, 20.0])
    a = nb("digitize")(values, edges)
    b = npk("digitize")(values, edges)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= len(edges) - 2


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_max_and_gap_agree(L, K, seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(K), size=L)
    if seed % 3 == 0:
        P[:, :] = 1.0 / K  # exact ties
    for x, y in zip(nb("max_and_gap")(P), npk("max_and_gap")(P)):
        assert np.array_equal(x, y)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 30), st.integers(0, 31), st.integers(0, 2**32 - 1))
def test_select_top_agrees(n, want, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, n).astype(float)  # many ties
    cand = rng.random(n) < 0.7
    a = nb("select_top")(scores, cand, want)
    b = npk("select_top")(scores, cand, want)
    assert np.array_equal(a, b)
    assert len(a) == min(want, cand.sum())
    assert np.all(cand[a])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(2, 6), st.sampled_from([0.0, 0.3, 1.0, 2.5]), st.integers(0, 2**32 - 1))
def test_gumbel_argmax_agrees(n, K, tau, seed):
    rng = np.random.default_rng(seed)
    logp = np.log(rng.dirichlet(np.ones(K), size=n))
    noise = rng.gumbel(size=(n, K))
    assert np.array_equal(nb("gumbel_argmax")(logp, noise, tau), npk("gumbel_argmax")(logp, noise, tau))


def test_float_kernels_agree():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(17, 12)) * 3
    assert np.allclose(nb("softmax_rows")(x), npk("softmax_rows")(x), atol=1e-15)
    g, b = rng.normal(size=12), rng.normal(size=12)
    fa, fb = nb("layernorm_fwd")(x, g, b, 1e-5), npk("layernorm_fwd")(x, g, b, 1e-5)
    for u, v in zip(fa, fb):
        assert np.allclose(u, v, atol=1e-12)
    dy = rng.normal(size=x.shape)
    for u, v in zip(nb("layernorm_bwd")(dy, fa[1], fa[2], g), npk("layernorm_bwd")(dy, fa[1], fa[2], g)):
        assert np.allclose(u, v, atol=1e-12)
    flat = x.reshape(-1)
    ya, ta = nb("gelu_fwd")(flat)
    yb, tb = npk("gelu_fwd")(flat)
    assert np.allclose(ya, yb, atol=1e-14) and np.allclose(ta, tb, atol=1e-14)
    d = rng.normal(size=flat.shape)
    assert np.allclose(nb("gelu_bwd")(d, flat, ta), npk("gelu_bwd")(d, flat, tb), atol=1e-13)


def test_layernorm_backward_numerically(backend):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5))
    g, b = rng.normal(size=5), rng.normal(size=5)
    dy = rng.normal(size=(3, 5))
    _, xh, rs = kernels.layernorm_fwd(x, g, b)
    dx, _, _ = kernels.layernorm_bwd(dy, xh, rs, g)
    eps = 1e-6
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        num[i] = (np.sum(dy * kernels.layernorm_fwd(xp, g, b)[0]) - np.sum(dy * kernels.layernorm_fwd(xm, g, b)[0])) / (2 * eps)
    assert np.allclose(dx, num, atol=1e-7)


def test_use_backend_switches_and_restores():
    prev = kernels.use_backend("numpy")
    assert kernels.backend() == "numpy"
    kernels.use_backend(prev)
    assert kernels.backend() == prev
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_env_flag_selects_numpy():
    env = dict(os.environ, **{DISABLE_ENV: "1"})
    out = subprocess.run([sys.executable, "-c", "from dact import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    if HAVE_NUMBA:
        env[DISABLE_ENV] = "0"
        out = subprocess.run([sys.executable, "-c", "from dact import kernels; print(kernels.backend())"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numba"
