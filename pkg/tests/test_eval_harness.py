import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from graphreason.environment import DEGREE, EnvConfig, Environment
from graphreason.eval_harness import (
    AgentBundle,
    DatasetError,
    EvalReport,
    QARecord,
    SuiteParams,
    bootstrap_mean_ci,
    generate_synthetic_suite,
    gold_script,
    lcs_length,
    load_dataset,
    load_grbench_records,
    rouge_l,
    run_benchmark,
    run_greedy,
    save_dataset,
)
from graphreason.mcts import MctsConfig
from graphreason.policy import ScriptedPolicy
from graphreason.reward import answer_matches


def brute_lcs(a, b):
    for k in range(min(len(a), len(b)), 0, -1):
        subs = set(itertools.combinations(b, k))
        if any(c in subs for c in itertools.combinations(a, k)):
            return k
    return 0


def test_rouge_examples():
    assert rouge_l("the cat", "the cat sat") == pytest.approx(0.8, abs=1e-15)
    assert rouge_l("Nicholas Lydon", "nicholas lydon.") == 1.0
    assert rouge_l("a b", "c d") == 0.0
    assert rouge_l("", "x") == 0.0


def test_lcs_examples():
    x = list(range(7))
    assert lcs_length(x, x) == 7
    assert lcs_length(x, x[::-1]) == 1
    assert lcs_length([], x) == 0


@given(st.lists(st.sampled_from("abc"), max_size=8), st.lists(st.sampled_from("abc"), max_size=8))
def test_lcs_matches_brute_force(a, b):
    assert lcs_length(a, b) == brute_lcs(a, b)


@given(st.text(alphabet="ab c", max_size=20), st.text(alphabet="ab c", max_size=20))
def test_rouge_symmetric_and_bounded(a, b):
    r = rouge_l(a, b)
    assert 0.0 <= r <= 1.0
    assert r == rouge_l(b, a)


def test_dataset_round_trip(tmp_path, suite):
    _, recs = suite
    save_dataset(tmp_path / "d.jsonl", recs)
    assert load_dataset(tmp_path / "d.jsonl") == recs


@pytest.mark.parametrize("line", ['{"id": 1, "question": "q"}', '{"id": 1, "question": "q", "answers": []}',
                                  "{oops"])
def test_dataset_errors(tmp_path, line):
    (tmp_path / "d.jsonl").write_text('{"id": "a", "question": "q", "answers": ["x"]}\n' + line + "\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(tmp_path / "d.jsonl")


def test_grbench_records(tmp_path):
    rows = [{"qid": f"r{i}", "question": f"What is {i}?", "answer": i} for i in range(10)]
    (tmp_path / "g.jsonl").write_text("\n".join(json.dumps(r) for r in rows))
    recs = load_grbench_records(tmp_path / "g.jsonl")
    assert [r.id for r in recs] == [f"r{i}" for i in range(10)]
    assert recs[3].answers == ["3"]
    (tmp_path / "bad.jsonl").write_text('{"question": "q"}\n')
    with pytest.raises(DatasetError, match="line 1"):
        load_grbench_records(tmp_path / "bad.jsonl")


def test_suite_is_seeded():
    a = generate_synthetic_suite(SuiteParams(), seed=9)
    b = generate_synthetic_suite(SuiteParams(), seed=9)
    assert a[1] == b[1]
    assert sorted(a[0].edges()) == sorted(b[0].edges())
    assert a[0].nodes == b[0].nodes


@pytest.mark.parametrize("seed", range(10))
def test_gold_paths_reproduce_answers(seed):
    g, recs = generate_synthetic_suite(SuiteParams(n_questions=6), seed=seed)
    assert len(g.nodes) <= 30
    env = Environment(g, EnvConfig(max_depth=10))
    for rec in recs:
        assert len(rec.gold_path) <= 3
        t = run_greedy(rec.question, env, gold_script(rec))
        assert all(s.env_error is None for s in t.steps)
        assert answer_matches(t.final_answer, rec.answers)
        if rec.template == "count_papers":
            nid = next(s.action.args[0] for s in t.steps if s.action.kind == DEGREE)
            assert rec.answers == [str(g.degree(nid, "paper"))]


def test_scripted_agent_on_fixture(lydon_env, lydon_record):
    rep = run_benchmark([lydon_record], lydon_env, AgentBundle("scripted"))
    assert rep.records[0].prediction == "2" and rep.records[0].exact_match
    assert rep.records[0].reward == 2.5


def test_empty_dataset(lydon_env):
    rep = run_benchmark([], lydon_env, AgentBundle("greedy"))
    assert rep.records == [] and rep.aggregates["n"] == 0 and rep.aggregates["mean_rouge_l"] == 0.0


def test_errors_are_recorded_not_raised(lydon_env):
    rec = QARecord("x", "How many papers are written by author Nicholas Lydon?", ["2"])
    rep = run_benchmark([rec], lydon_env, AgentBundle("scripted"))
    assert rep.records[0].error.startswith("DatasetError")
    assert rep.records[0].terminal_reason == "error"


def test_report_round_trip_and_consistency(suite_env, suite):
    _, recs = suite
    rep = run_benchmark(recs, suite_env, AgentBundle("mcts", mcts=MctsConfig(simulations_per_move=5)), jobs=3)
    assert [r.id for r in rep.records] == [r.id for r in recs]
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    assert "ROUGE-L" in rep.summary_table()
    rep.aggregates["mean_reward"] += 1
    with pytest.raises(ValueError):
        rep.to_json()


def test_parallel_matches_serial(suite_env, suite):
    _, recs = suite
    bundle = AgentBundle("mcts", mcts=MctsConfig(simulations_per_move=5), seed=4)
    assert run_benchmark(recs, suite_env, bundle, jobs=1).to_json() == \
        run_benchmark(recs, suite_env, bundle, jobs=4).to_json()


def test_bootstrap_interval():
    lo, hi = bootstrap_mean_ci([1.0] * 20)
    assert lo == hi == 1.0
    x = np.random.default_rng(0).normal(0.3, 1.0, 200)
    lo, hi = bootstrap_mean_ci(x)
    assert lo < x.mean() < hi


def test_scripted_policy_from_gold(suite):
    _, recs = suite
    assert isinstance(gold_script(recs[0]), ScriptedPolicy)
    with pytest.raises(DatasetError):
        gold_script(QARecord("q", "q", ["a"]))
