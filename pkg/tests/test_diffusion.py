import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dact.codec import ActionChunk
from dact.diffusion import (
    corrupt_bernoulli,
    corrupt_fixed_count,
    cumulative_beta,
    forward_marginal,
    mask_count,
    masked_ce,
)
from dact.errors import DomainError, ValidationError
from dact.oracles import enumerate_forward_marginal, transition_matrix

MASK = 256


def chunk56(rng):
    return ActionChunk(rng.integers(0, 256, size=56), horizon=8, dims=7, mask_id=MASK)


def test_corruption_masks_exactly_the_set(rng):
    c = chunk56(rng)
    out = corrupt_fixed_count(c, 0.5, rng)
    assert len(out.masked_set) == 28
    hit = out.mask_vector()
    assert np.all(out.corrupted.tokens[hit] == MASK)
    assert np.array_equal(out.corrupted.tokens[~hit], c.tokens[~hit])


def test_corruption_extremes(rng):
    c = chunk56(rng)
    assert len(corrupt_fixed_count(c, 1.0, rng).masked_set) == 56
    tiny = corrupt_fixed_count(c, 1e-6, rng)
    assert len(tiny.masked_set) == 0 and tiny.corrupted == c
    with pytest.raises(DomainError):
        corrupt_fixed_count(c, 0.0, rng)
    assert mask_count(0.5, 56) == 28


def test_bernoulli_extremes_and_rate():
    rng = np.random.default_rng(11)
    c = chunk56(rng)
    assert corrupt_bernoulli(c, 0.0, rng).corrupted == c
    assert np.all(corrupt_bernoulli(c, 1.0, rng).corrupted.tokens == MASK)
    hits = sum(len(corrupt_bernoulli(c, 0.75, rng).masked_set) for _ in range(100_000 // 56 + 1))
    frac = hits / ((100_000 // 56 + 1) * 56)
    assert abs(frac - 0.75) < 0.01


def test_forward_marginal_examples():
    p = forward_marginal(3, [0.0], 10)
    assert p[3] == 1.0 and p.sum() == 1.0
    p = forward_marginal(3, [0.5, 0.5], 10)
    assert p[9] == 0.75 and p[3] == 0.25
    p = enumerate_forward_marginal(2, [0.3], 5)
    assert np.allclose(p, [0, 0, 0.7, 0, 0.3], atol=1e-15)


def test_transition_matrix_columns_stochastic():
    Q = transition_matrix(0.37, 7)
    assert np.allclose(Q.sum(axis=0), 1.0)
    assert Q[6, 6] == 1.0  # mask is absorbing


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 60), st.data())
def test_forward_marginal_matches_dense_oracle(V, data):
    token = data.draw(st.integers(0, V - 2))
    betas = data.draw(st.lists(st.floats(0, 1), min_size=1, max_size=20))
    assert np.max(np.abs(forward_marginal(token, betas, V) - enumerate_forward_marginal(token, betas, V))) < 1e-12


def test_cumulative_beta_domain():
    assert cumulative_beta([0.5, 0.5]) == 0.75
    with pytest.raises(DomainError):
        cumulative_beta([1.2])


def test_masked_ce_examples():
    K = 256
    uniform = np.full((4, K), 1.0 / K)
    assert abs(masked_ce(uniform, np.zeros(4, int), [1]) - math.log(256)) < 1e-12
    assert abs(masked_ce(uniform, np.zeros(4, int), [0, 1, 2]) - 3 * math.log(256)) < 1e-9
    perfect = np.eye(3)
    assert masked_ce(perfect, np.arange(3), [0, 2]) == 0.0
    P = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert abs(masked_ce(P, np.array([0, 0]), [0, 1]) - 2.0794415416798357) < 1e-9


def test_masked_ce_floor_and_errors():
    P = np.array([[1.0, 0.0]])
    assert masked_ce(P, np.array([1]), [0]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValidationError):
        masked_ce(P, np.array([1]), [])
