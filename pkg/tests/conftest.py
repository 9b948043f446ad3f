from importlib.resources import files

import pytest

from graphreason.environment import EnvConfig, Environment
from graphreason.eval_harness import SuiteParams, generate_synthetic_suite, load_dataset
from graphreason.graph_store import Graph, GraphSchema, Node, load_graph

DATA = files("graphreason") / "data"
LYDON_ID = "53f438c3dabfaedf43596117"
LYDON_Q = "How many papers are written by author Nicholas Lydon?"


@pytest.fixture(scope="session")
def lydon_graph():
    return load_graph(DATA / "lydon_graph.jsonl")


@pytest.fixture(scope="session")
def lydon_record():
    return load_dataset(DATA / "lydon_question.jsonl")[0]


@pytest.fixture
def lydon_env(lydon_graph):
    return Environment(lydon_graph)


@pytest.fixture(scope="session")
def suite():
    return generate_synthetic_suite(SuiteParams(n_questions=6), seed=3)


@pytest.fixture
def suite_env(suite):
    return Environment(suite[0], EnvConfig(max_depth=10))


TOY_SCHEMA = GraphSchema(
    node_types=("person", "city"),
    edge_types=("lives_in", "knows", "resident"),
    feature_keys_per_node_type={"person": ("name", "bio"), "city": ("name",)},
    primary_feature_key_per_node_type={"person": "name", "city": "name"},
    description="People who know each other and the cities they live in.",
    symmetric_edge_types=("knows",),
)


@pytest.fixture
def toy_graph():
    nodes = [
        Node("p1", "person", {"name": "Ada Lovelace", "bio": "mathematician"}),
        Node("p2", "person", {"name": "Charles Babbage", "bio": ""}),
        Node("p3", "person", {"name": "Mary Somerville", "bio": "science writer"}),
        Node("c1", "city", {"name": "London"}),
    ]
    edges = [("p1", "c1", "lives_in"), ("p2", "c1", "lives_in"), ("p1", "p2", "knows"),
             ("c1", "p1", "resident"), ("c1", "p2", "resident")]
    return Graph.build(TOY_SCHEMA, nodes, edges)


@pytest.fixture
def toy_env(toy_graph):
    return Environment(toy_graph)


def make_step(i, kind="NodeDegree", args=("p1", "paper"), *, thought="t", obs="2",
              error=None, malformed=False):
    from graphreason.environment import Action, Step
    return Step(index=i, thought=thought, action=Action(kind, tuple(args)), observation=obs,
                env_error=error, malformed=malformed)


def make_traj(steps, answer=None):
    from graphreason.environment import Trajectory
    return Trajectory(query="q", steps=list(steps), final_answer=answer)


def reward_examples():
    """The nine reward-table cases as (function name, trajectory, gold, expected)."""
    ok = make_step
    fin = lambda i, a, **kw: make_step(i, "Finish", (a,), obs=f"Final answer: {a}", **kw)  # noqa: E731
    return [
        ("format", make_traj([ok(1)]), None, 0.5),
        ("format", make_traj([ok(1), ok(2)]), None, 1.0),
        ("format", make_traj([ok(1), ok(2), ok(3)]), None, 1.0),
        ("reasoning", make_traj([ok(1), fin(2, "2")], "2"), ["2"], 1.5),
        ("reasoning", make_traj([ok(1), fin(2, "3")], "3"), ["2"], 0.0),
        ("reasoning", make_traj([ok(1, error="unknown_node", obs="Error: x")]), ["2"], 0.0),
        ("total", make_traj([ok(1), fin(2, " 2.")], " 2."), ["2"], 2.5),
        ("total", make_traj([fin(1, "7", thought="")], "7"), ["2"], -0.5),
        ("total", make_traj([ok(1), fin(2, "7", thought="")], "7"), ["2"], 0.5),
    ]


def oracle_best_reward(env, query, gold, depth=3):
    """Max total reward over every candidate-action sequence of length <= depth."""
    from graphreason.environment import Trajectory
    from graphreason.policy import default_thought
    from graphreason.reward import total_reward

    best = -float("inf")

    def rec(s):
        nonlocal best
        if s.terminal or s.depth >= depth:
            best = max(best, total_reward(Trajectory.from_state(s), gold).total)
            return
        for a in env.candidate_actions(s):
            rec(env.step(s, default_thought(a), a)[0])

    rec(env.reset(query))
    return best


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
