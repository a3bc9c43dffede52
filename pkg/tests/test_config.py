import pytest
from hypothesis import given, strategies as st

from remotemem.config import LADDER_FLAGS, EngineConfig, parse_config_text


@pytest.mark.parametrize("level", range(8))
def test_for_level_is_cumulative(level):
    cfg = EngineConfig.for_level(level)
    assert [getattr(cfg, f) for f in LADDER_FLAGS] == [i < level for i in range(7)]
    assert cfg.level == level


def test_invalid_configs():
    with pytest.raises(ValueError):
        EngineConfig(capacity=0)
    with pytest.raises(ValueError):
        EngineConfig(evict_batch_threshold=0)
    with pytest.raises(ValueError):
        EngineConfig(prefetch=True)
    with pytest.raises(ValueError):
        EngineConfig(affinity_map={"gpu": 0})
    with pytest.raises(ValueError):
        EngineConfig.for_level(8)


@given(st.integers(0, 7), st.integers(1, 5000), st.integers(1, 64), st.booleans(),
       st.none() | st.dictionaries(st.sampled_from(["evict", "prefetch", "reinit"]),
                                   st.integers(0, 63), min_size=1))
def test_text_round_trip(level, cap, batch, zero_writes, aff):
    cfg = EngineConfig.for_level(level, capacity=cap, evict_batch_threshold=batch,
                                 paper_write_fault_mode=zero_writes, affinity_map=aff)
    assert EngineConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", [
    "capacity 4", "colour = red", "page_cache = maybe", "capacity = lots",
    "affinity_map = evict",
])
def test_parse_errors(text):
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text(text)


def test_comments_and_mixed_case():
    assert parse_config_text("# hi\nzero_page = On  # x\n\ncapacity=12\n") == {
        "zero_page": True, "capacity": 12}
