import math

import numpy as np
import pytest

from graphreason.environment import FINISH, RETRIEVE, Action, EnvConfig, Environment, State
from graphreason.eval_harness import SuiteParams, generate_synthetic_suite, run_greedy
from graphreason.mcts import (
    HeuristicEvaluator,
    MctsConfig,
    TreeNode,
    backpropagate,
    commit_action,
    expand,
    read_trace,
    search,
    select,
    simulate,
    ucb_score,
    write_trace,
)
from graphreason.policy import ActionProposal, PolicyParams, ScriptedPolicy, SoftmaxPolicy
from graphreason.reward import total_reward

from conftest import LYDON_ID, LYDON_Q, make_step, oracle_best_reward


class Const:
    def __init__(self, v):
        self.v = v

    def value(self, path, query):
        return self.v


C = math.sqrt(2)


def test_ucb_examples():
    assert ucb_score(0.3, 10, 0, C) == math.inf
    assert ucb_score(0.5, 10, 2, 1.414214) == pytest.approx(0.5 + 1.414214 * math.sqrt(math.log(10) / 2))


def node_with(children, depth=0):
    """children: list of (name, Q, N, subtree)."""
    st = State("q", steps=tuple(make_step(i + 1) for i in range(depth)))
    n = TreeNode(st)
    n.proposals = []
    for name, q, cnt, sub in children:
        a = Action.of(RETRIEVE, name)
        n.proposals.append(ActionProposal("t", a))
        n.children[a] = sub if sub is not None else node_with([], depth + 1)
        n.q_values[a] = q
        n.visit_counts[a] = cnt
    n.node_visits = 1 + sum(c[2] for c in children)
    if not children:
        n.proposals = None
    return n


def test_select_equal_counts_prefers_higher_q():
    root = node_with([("a", 0.1, 2, None), ("b", 0.9, 2, None)])
    path, _ = select(root, MctsConfig())
    assert path[0][1].args == ("b",)


def test_select_stops_at_unexpanded_candidates():
    root = node_with([("a", 0.1, 2, None)])
    root.proposals.append(ActionProposal("t", Action.of(RETRIEVE, "z")))
    path, leaf = select(root, MctsConfig())
    assert path == [] and leaf is root


def test_select_three_levels_by_hand():
    deep_a = node_with([("x", 0.2, 1, None), ("y", 0.25, 3, None)], depth=2)
    mid = node_with([("p", 0.6, 4, deep_a), ("r", 0.3, 1, None)], depth=1)
    root = node_with([("m", 0.5, 6, mid), ("n", 0.55, 2, None)])

    def pick(node):
        best = max(node.ordered_actions(),
                   key=lambda a: node.q_values[a] + C * math.sqrt(math.log(node.node_visits) / node.visit_counts[a]))
        return best.args[0]

    path, leaf = select(root, MctsConfig())
    names = [a.args[0] for _, a in path]
    want = []
    node = root
    while node.children:
        name = pick(node)
        want.append(name)
        node = node.children[Action.of(RETRIEVE, name)]
    assert names == want
    assert leaf is node


def test_select_ties_follow_candidate_order():
    root = node_with([("b", 0.5, 2, None), ("a", 0.5, 2, None)])
    path, _ = select(root, MctsConfig())
    assert path[0][1].args == ("b",)


def test_expand_width_and_init(suite_env, suite):
    g, recs = suite
    q = recs[0].question
    root = TreeNode(suite_env.reset(q))
    s, _, _ = suite_env.step(root.state, "t", suite_env.candidate_actions(root.state)[0])
    node = TreeNode(s)
    cands = suite_env.candidate_actions(s)
    assert len(cands) > 3
    kids = expand(node, SoftmaxPolicy(), Const(0.7), suite_env, MctsConfig(width=3))
    assert len(kids) == 3
    assert list(node.children) == cands[:3]
    assert all(node.q_values[a] == 0.7 and node.visit_counts[a] == 1 for a in node.children)
    assert node.node_visits == 1 + 3
    expand(node, SoftmaxPolicy(), Const(0.7), suite_env, MctsConfig(width=3))
    assert list(node.children) == cands[:6]


def test_expand_terminal_child_is_evaluated(lydon_env):
    s = lydon_env.reset(LYDON_Q)
    s, _, _ = lydon_env.step(s, "t", Action.of(RETRIEVE, "Nicholas Lydon"))
    node = TreeNode(s)
    kids = expand(node, ScriptedPolicy([]), Const(0.3), lydon_env, MctsConfig())
    assert kids[0].state.terminal and node.q_values[Action.of(FINISH, "")] == 0.3
    with pytest.raises(Exception):
        expand(kids[0], ScriptedPolicy([]), Const(0.3), lydon_env, MctsConfig())


def test_simulate_from_terminal_is_zero_length(lydon_env):
    s = lydon_env.reset(LYDON_Q)
    s, _, _ = lydon_env.step(s, "t", Action.of(FINISH, "2"))
    traj, v = simulate(TreeNode(s), SoftmaxPolicy(), Const(0.4), lydon_env, MctsConfig(),
                       np.random.default_rng(0))
    assert len(traj.steps) == 1 and v == 0.4


def test_simulate_scripted_follows_script(lydon_env, lydon_record):
    from graphreason.eval_harness import gold_script
    traj, _ = simulate(TreeNode(lydon_env.reset(LYDON_Q)), gold_script(lydon_record),
                       HeuristicEvaluator(), lydon_env, MctsConfig(), np.random.default_rng(0))
    assert [s.action.render() for s in traj.steps] == [
        "RetrieveNode[Nicholas Lydon]", f"NodeDegree[{LYDON_ID}, paper]", "Finish[2]"]


def test_backprop_example_and_fixed_point():
    root = node_with([("a", 0.4, 4, None)])
    a = Action.of(RETRIEVE, "a")
    backpropagate([(root, a)], 0.9)
    assert root.q_values[a] == 0.5 and root.visit_counts[a] == 5
    assert root.node_visits == 6
    root = node_with([("a", 0.37, 1, None)])
    backpropagate([(root, a)], 0.37)
    assert root.q_values[a] == pytest.approx(0.37, abs=1e-15)


def test_commit_picks_most_visited_then_order():
    root = node_with([("a", 0.9, 2, None), ("b", 0.1, 5, None), ("c", 0.5, 5, None)])
    assert commit_action(root).args == ("b",)


def test_heuristic_evaluator_range_and_grounding(lydon_env, lydon_graph):
    ev = HeuristicEvaluator(lydon_graph)
    s = lydon_env.reset(LYDON_Q)
    assert ev.value(s, LYDON_Q) == 0.0
    s, _, _ = lydon_env.step(s, "t", Action.of(RETRIEVE, "Nicholas Lydon"))
    partial = ev.value(s, LYDON_Q)
    s2, _, _ = lydon_env.step(s, "t", Action.of("NodeDegree", LYDON_ID, "paper"))
    good, _, _ = lydon_env.step(s2, "t", Action.of(FINISH, "2"))
    bad, _, _ = lydon_env.step(s2, "t", Action.of(FINISH, "Nicholas Lydon"))
    assert 0 < partial < ev.value(good, LYDON_Q) <= 1.0
    assert ev.value(bad, LYDON_Q) < ev.value(good, LYDON_Q)


def test_degenerate_config_equals_greedy(suite_env, suite):
    _, recs = suite
    pol = SoftmaxPolicy(PolicyParams(np.r_[0, 0.3, -0.2, 0.1, 0.5, 2.0, -1.0, -0.5, 0]))
    for rec in recs:
        res = search(rec.question, suite_env, pol, HeuristicEvaluator(),
                     MctsConfig(width=1, simulations_per_move=1))
        greedy = run_greedy(rec.question, suite_env, pol)
        assert [s.action for s in res.trajectory.steps] == [s.action for s in greedy.steps]


def test_search_is_seeded_and_tree_invariants(suite_env, suite):
    g, recs = suite
    cfg = MctsConfig(simulations_per_move=30, seed=11)
    a = search(recs[1].question, suite_env, SoftmaxPolicy(), HeuristicEvaluator(g), cfg)
    b = search(recs[1].question, suite_env, SoftmaxPolicy(), HeuristicEvaluator(g), cfg)
    assert a.trajectory.to_dict() == b.trajectory.to_dict()
    assert [m.to_dict() for m in a.moves] == [m.to_dict() for m in b.moves]

    stack = [a.root]
    while stack:
        n = stack.pop()
        assert n.node_visits == sum(n.visit_counts.values()) + 1
        assert all(0.0 <= q <= 1.0 for q in n.q_values.values())
        stack.extend(n.children.values())


def test_trace_round_trip(tmp_path, lydon_env):
    res = search(LYDON_Q, lydon_env, SoftmaxPolicy(), HeuristicEvaluator(),
                 MctsConfig(simulations_per_move=5))
    write_trace(tmp_path / "t.jsonl", res.moves)
    back = read_trace(tmp_path / "t.jsonl")
    assert [m.to_dict() for m in back] == [m.to_dict() for m in res.moves]
    assert back[0].committed_action == res.trajectory.steps[0].action.render()


def test_config_validation():
    with pytest.raises(ValueError):
        MctsConfig(width=0)
    with pytest.raises(ValueError):
        MctsConfig(c_explore=0)


def test_budget_monotonicity():
    wins = {20: 0, 200: 0}
    for seed in range(100):
        g, recs = generate_synthetic_suite(SuiteParams(n_questions=3), seed=seed)
        r = recs[seed % len(recs)]
        env = Environment(g, EnvConfig(max_depth=10))
        best = oracle_best_reward(env, r.question, r.answers)
        for sims in wins:
            res = search(r.question, env, SoftmaxPolicy(), HeuristicEvaluator(g),
                         MctsConfig(width=3, max_depth=10, simulations_per_move=sims, seed=seed))
            wins[sims] += total_reward(res.trajectory, r.answers).total >= best - 1e-12
    assert wins[200] >= wins[20]
