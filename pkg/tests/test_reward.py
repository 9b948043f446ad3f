import pytest
from hypothesis import given
from hypothesis import strategies as st

from graphreason.reward import (
    RewardBreakdown,
    answer_matches,
    format_reward,
    is_well_formed,
    normalize_answer,
    reasoning_reward,
    total_reward,
)

from conftest import make_step, make_traj, reward_examples


@pytest.mark.parametrize("fn,traj,gold,want", reward_examples())
def test_reward_table(fn, traj, gold, want):
    if fn == "format":
        assert format_reward(traj) == want
    elif fn == "reasoning":
        assert reasoning_reward(traj, gold) == want
    else:
        assert total_reward(traj, gold).total == want


def test_no_answer_no_ops_is_zero():
    t = make_traj([make_step(1, error="unknown_node", obs="Error: x")])
    assert reasoning_reward(t, ["a"]) == 0.0


def test_well_formed_rules():
    assert is_well_formed(make_step(1))
    assert not is_well_formed(make_step(1, thought="  "))
    assert not is_well_formed(make_step(1, error="unknown_node"))
    assert not is_well_formed(make_step(1, malformed=True))
    assert not is_well_formed(make_step(1, obs=""))


def test_empty_gold_rejected():
    with pytest.raises(ValueError):
        reasoning_reward(make_traj([]), [])


@pytest.mark.parametrize("raw,want", [(" 2.", "2"), ("  Nicholas   LYDON!", "nicholas lydon"),
                                      ("“Quoted”", "quoted"), ("", "")])
def test_normalize(raw, want):
    assert normalize_answer(raw) == want


def test_aliases():
    assert answer_matches("ICML.", ["NeurIPS", "icml"])
    assert not answer_matches("", ["x"])


@given(st.text(max_size=30))
def test_normalize_idempotent(s):
    assert normalize_answer(normalize_answer(s)) == normalize_answer(s)


step_st = st.builds(
    make_step,
    st.integers(1, 10),
    st.sampled_from(["NodeDegree", "NodeFeature", "NeighbourCheck"]),
    st.just(("n", "k")),
    thought=st.sampled_from(["", "t"]),
    obs=st.sampled_from(["", "x"]),
    error=st.sampled_from([None, "unknown_node"]),
    malformed=st.booleans(),
)


@given(st.lists(step_st, max_size=6), st.one_of(st.none(), st.sampled_from(["a", "b", ""])),
       st.lists(st.sampled_from(["a", "c"]), min_size=1, max_size=2))
def test_total_in_range_and_sums(steps, answer, gold):
    r = total_reward(make_traj(steps, answer), gold)
    assert isinstance(r, RewardBreakdown)
    assert -0.5 <= r.total <= 2.5
    assert r.total == r.format + r.reasoning
    assert 0.0 <= r.format <= 1.0
