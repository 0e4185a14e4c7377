import json
from pathlib import Path

import numpy as np
import pytest

from dact.decoder import CountingModel, DecodeConfig, decode
from dact.errors import ConfigError, CoverageError, ValidationError
from dact.model import ModelConfig, PolicyModel
from dact.oracles import TabulatedModel, ar_baseline_decode, exhaustive_decode

FIXTURES = Path(__file__).parent / "fixtures"


def test_single_position_single_round():
    table = {(0, (s,)): np.array([[0.2, 0.1, 0.7]]) for s in range(4)}
    tab = TabulatedModel(1, 3, table)
    cfg = DecodeConfig(total_rounds=1, temperature_mode="hard")
    assert exhaustive_decode(tab, cfg).tokens.tolist() == [2]
    assert decode(tab, 0, cfg)[0].tokens.tolist() == [2]


def test_easy_first_order():
    M = 2
    table = {}
    for a in range(3):
        for b in range(3):
            table[(0, (a, b))] = np.array([[0.6, 0.4], [0.1, 0.9]])
    tab = TabulatedModel(2, 2, table)
    cfg = DecodeConfig(total_rounds=2, temperature_mode="hard")
    _, trace = decode(tab, 0, cfg)
    assert trace.rounds[0].keep_set.tolist() == [1]
    assert trace.rounds[0].tokens_after.tolist() == [M, 1]
    assert exhaustive_decode(tab, cfg).tokens.tolist() == [0, 1]


def test_small_toy_example():
    tab = TabulatedModel.load(FIXTURES / "table_L3_K2.json")
    for T in (1, 2, 3, 12):
        cfg = DecodeConfig(total_rounds=T, temperature_mode="hard")
        assert decode(tab, 0, cfg)[0] == exhaustive_decode(tab, cfg)


@pytest.mark.parametrize("name", ["table_L2_K3", "table_L3_K2", "table_L4_K3"])
def test_fixture_tables_reproduce_recorded_outputs(name):
    doc = json.loads((FIXTURES / f"{name}.json").read_text())
    tab = TabulatedModel.from_dict(doc)
    for key, expected in doc["expected"].items():
        T, c = key[1:].split("_c")
        cfg = DecodeConfig(total_rounds=int(T), temperature_mode="hard")
        assert decode(tab, int(c), cfg)[0].tokens.tolist() == expected
        assert exhaustive_decode(tab, cfg, int(c)).tokens.tolist() == expected


def test_fuzzed_tables_agree_with_decoder():
    cases = json.loads((FIXTURES / "tabulated_seeds.json").read_text())
    assert len(cases) == 50
    for case in cases:
        tab = TabulatedModel.random(case["L"], case["K"], np.random.default_rng(case["seed"]),
                                    concentration=case["concentration"])
        for scoring in ("max_confidence", "confidence_gap", "one_shot_parallel"):
            for T in (1, 2, 4, 12):
                cfg = DecodeConfig(total_rounds=T, scoring=scoring, temperature_mode="hard")
                assert decode(tab, 0, cfg)[0] == exhaustive_decode(tab, cfg), case


def test_oracle_refuses_what_it_does_not_model():
    tab = TabulatedModel.random(2, 2, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        exhaustive_decode(tab, DecodeConfig(temperature_mode="decay"))
    with pytest.raises(ConfigError):
        exhaustive_decode(tab, DecodeConfig(temperature_mode="hard", remask_drop=True))
    with pytest.raises(ValidationError):
        TabulatedModel.random(5, 2, np.random.default_rng(0))


def test_missing_table_entry_is_coverage_error():
    tab = TabulatedModel(1, 2, {})
    with pytest.raises(CoverageError):
        decode(tab, 0, DecodeConfig(temperature_mode="hard"))


def test_table_save_load(tmp_path):
    tab = TabulatedModel.random(2, 3, np.random.default_rng(4), n_contexts=2)
    tab.save(tmp_path / "t.json")
    back = TabulatedModel.load(tmp_path / "t.json")
    assert back.to_dict() == tab.to_dict()


def test_ar_baseline_nfe():
    cfg = ModelConfig(vocab_size=9, context_vocab=4, L=56, context_len=2, embed_dim=8, heads=2, ff_dim=8, layers=1)
    model = CountingModel(PolicyModel(cfg, rng=0))
    chunk, nfe = ar_baseline_decode(model, np.zeros(2, int))
    assert nfe == model.calls == 56 and not chunk.has_mask()
    assert round(56 / 12, 1) == 4.7


def test_ar_length_one_equals_one_shot():
    cfg = ModelConfig(vocab_size=9, context_vocab=4, L=1, context_len=2, embed_dim=8, heads=2, ff_dim=8, layers=1,
                      head_init_std=0.5)
    model = PolicyModel(cfg, rng=3)
    ctx = np.array([1, 2])
    chunk, nfe = ar_baseline_decode(model, ctx)
    one, _ = decode(model, ctx, DecodeConfig(scoring="one_shot_parallel"))
    assert nfe == 1 and chunk == one
