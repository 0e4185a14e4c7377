import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dact.codec import ActionChunk, TokenizerSpec, detokenize_chunk, fit_bins, tokenize_chunk, tokenize_values
from dact.errors import ChecksumError, DegenerateDataError, IncompleteChunkError, ValidationError


def sort_and_index_quantile(xs, q):
    # linear interpolation between order statistics, written out by hand
    s = sorted(xs)
    pos = q * (len(s) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


@pytest.fixture(scope="module")
def four_bin():
    x = np.linspace(-1.0, 1.0, 10001)
    return fit_bins(x[:, None], num_bins=4, gripper_dim_index=None), x


def test_four_bin_edges_match_sort_and_index(four_bin):
    spec, x = four_bin
    levels = np.linspace(1, 99, 5) / 100
    expect = [sort_and_index_quantile(x.tolist(), q) for q in levels]
    assert np.allclose(spec.edges[0], expect, atol=1e-12)
    assert np.allclose(spec.edges[0], [-0.98, -0.49, 0.0, 0.49, 0.98], atol=1e-9)


def test_four_bin_value_lookup(four_bin):
    spec, _ = four_bin
    assert tokenize_values(np.array([0.25]), spec, 0)[0] == 2
    assert tokenize_values(np.array([-5.0]), spec, 0)[0] == 0
    assert tokenize_values(np.array([spec.edges[0][-1]]), spec, 0)[0] == 3
    assert tokenize_values(np.array([spec.edges[0][2]]), spec, 0)[0] == 2  # half-open


def test_identical_samples_are_degenerate():
    with pytest.raises(DegenerateDataError):
        fit_bins(np.full((500, 1), 0.3), num_bins=4, gripper_dim_index=None)


def test_non_finite_samples_rejected():
    x = np.linspace(0, 1, 100)
    x[3] = np.nan
    with pytest.raises(ValidationError):
        fit_bins(x[:, None], num_bins=4, gripper_dim_index=None)


def test_gripper_binary():
    rng = np.random.default_rng(0)
    data = np.column_stack([rng.normal(size=300), rng.integers(0, 2, 300).astype(float)])
    spec = fit_bins(data, num_bins=8, gripper_dim_index=1)
    assert spec.bins_in_dim(1) == 2
    assert spec.edges[1][1] == 0.5
    assert list(tokenize_values(np.array([0.0, 0.49, 0.5, 1.0]), spec, 1)) == [0, 0, 1, 1]
    chunk = ActionChunk(np.array([3, 1]), horizon=1, dims=2, mask_id=8)
    assert detokenize_chunk(chunk, spec)[0, 1] == 1.0


def test_fixed_ranges_give_uniform_bins():
    data = np.column_stack([np.linspace(0, 1, 50), np.zeros(50)])
    spec = fit_bins(data, num_bins=4, gripper_dim_index=None, fixed_ranges={1: (-1.0, 1.0)})
    assert np.allclose(spec.edges[1], [-1, -0.5, 0, 0.5, 1])
    assert tokenize_values(np.array([0.0]), spec, 1)[0] == 2


def test_mask_in_chunk_is_incomplete(four_bin):
    spec, _ = four_bin
    chunk = ActionChunk(np.array([0, spec.mask_id]), horizon=2, dims=1, mask_id=spec.mask_id)
    with pytest.raises(IncompleteChunkError):
        detokenize_chunk(chunk, spec)


def test_chunk_validation():
    with pytest.raises(ValidationError):
        ActionChunk(np.array([0, 1, 2]), horizon=2, dims=2, mask_id=5)
    with pytest.raises(ValidationError):
        ActionChunk(np.array([0, 6]), horizon=1, dims=2, mask_id=5)


def test_spec_invariants_enforced():
    with pytest.raises(ValidationError):
        TokenizerSpec(num_bins=2, dims=1, edges=(np.array([0.0, 0.0, 1.0]),), centers=(np.array([0.0, 0.5]),))
    with pytest.raises(ValidationError):
        TokenizerSpec(num_bins=2, dims=1, edges=(np.array([0.0, 0.5, 1.0]),), centers=(np.array([0.5, 0.7]),))


def test_serialization_round_trip(tmp_path, small_dataset):
    spec = small_dataset.tokenizer
    path = tmp_path / "tok.json"
    spec.save(path)
    back = TokenizerSpec.load(path)
    assert back == spec
    assert back.checksum() == spec.checksum()
    doc = json.loads(path.read_text())
    assert doc["format"] == "dact-tokenizer" and doc["version"] == 1


def test_tampered_tokenizer_rejected(tmp_path, small_dataset):
    path = tmp_path / "tok.json"
    small_dataset.tokenizer.save(path)
    doc = json.loads(path.read_text())
    doc["edges"][0][5] += 1e-6
    path.write_text(json.dumps(doc))
    with pytest.raises((ChecksumError, ValidationError)):
        TokenizerSpec.load(path)


def test_dataset_chunks_round_trip_within_bin(small_dataset):
    spec = small_dataset.tokenizer
    for ep in small_dataset.episodes[:50]:
        chunk = tokenize_chunk(ep.expert, spec)
        assert chunk.length == 56 and not chunk.has_mask()
        rec = detokenize_chunk(chunk, spec)
        toks = chunk.as_matrix()
        for d in range(spec.dims):
            width = spec.bin_widths(d)[toks[:, d]]
            inside = (ep.expert[:, d] >= spec.edges[d][0]) & (ep.expert[:, d] < spec.edges[d][-1])
            assert np.all(np.abs(rec[inside, d] - ep.expert[inside, d]) <= width[inside])


@pytest.fixture(scope="module")
def normal_spec():
    rng = np.random.default_rng(3)
    return fit_bins(rng.normal(size=(4000, 1)), num_bins=64, gripper_dim_index=None)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10, allow_nan=False))
def test_round_trip_bound(normal_spec, v):
    spec = normal_spec
    b = tokenize_values(np.array([v]), spec, 0)[0]
    if spec.edges[0][0] <= v < spec.edges[0][-1]:
        assert abs(spec.centers[0][b] - v) <= spec.bin_widths(0)[b]
    assert tokenize_values(spec.centers[0][[b]], spec, 0)[0] == b


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=50))
def test_monotone(normal_spec, values):
    v = np.sort(np.array(values))
    assert np.all(np.diff(tokenize_values(v, normal_spec, 0)) >= 0)
