"""UCT search over reasoning states with evaluator-initialised expansion and
receding-horizon commits."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .endpoint import ChatEndpoint
from .graph_store import Graph
from .environment import (
    FINISH,
    RETRIEVE,
    Action,
    Environment,
    State,
    TerminalStateError,
    Trajectory,
    render_steps,
)
from .policy import ActionProposal, Policy, PolicyParams, SoftmaxPolicy
from .text import content_stem_set, is_number, stem, stem_set, token_set, tokenize


@dataclass(frozen=True)
class MctsConfig:
    c_explore: float = math.sqrt(2)
    width: int = 3
    max_depth: int = 10
    simulations_per_move: int = 50
    rollout_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.simulations_per_move < 1 or self.max_depth < 1:
            raise ValueError("width, simulations_per_move and max_depth must be >= 1")
        if not self.c_explore > 0 or not self.rollout_temperature > 0:
            raise ValueError("c_explore and rollout_temperature must be positive")


@dataclass(eq=False)
class TreeNode:
    state: State
    prior_value: float = 0.0
    children: dict[Action, "TreeNode"] = field(default_factory=dict)
    q_values: dict[Action, float] = field(default_factory=dict)
    visit_counts: dict[Action, int] = field(default_factory=dict)
    # counts its own creation visit, so N(s) = sum_a N(s, a) + 1
    node_visits: int = 1
    proposals: list[ActionProposal] | None = None

    def unexpanded(self) -> list[ActionProposal]:
        if self.proposals is None:
            return []
        return [p for p in self.proposals if p.action not in self.children]

    def is_expandable(self, max_depth: int) -> bool:
        if self.state.terminal or self.state.depth >= max_depth:
            return False
        return self.proposals is None or bool(self.unexpanded())

    def ordered_actions(self) -> list[Action]:
        """Children in candidate (proposal) order."""
        if self.proposals is None:
            return list(self.children)
        order = [p.action for p in self.proposals if p.action in self.children]
        return order + [a for a in self.children if a not in set(order)]


class Evaluator(Protocol):
    def value(self, path: State, query: str) -> float: ...


# ---------------------------------------------------------------------------
# evaluators


def _expects_number(query: str) -> bool:
    q = " ".join(tokenize(query))
    return "how many" in q or "number of" in q or "how much" in q


_WHICH = re.compile(r"\b(?:which|what)\s+(\w+)")


class HeuristicEvaluator:
    """Lexical path score in [0, 1].

    Half the score is the share of (stemmed) query content words seen in the
    successful observations. The other half is awarded when the path ends in a
    non-empty answer that occurs verbatim in one observation, is not just a
    restatement of the query, and is numeric exactly when the query asks for
    a count. Given a graph, a "which <node type>" query additionally needs the
    answer to be the primary feature of a node of that type.
    """

    def __init__(self, graph: Graph | None = None):
        self.graph = graph
        self._types_of: dict[str, set[str]] | None = None

    def _answer_types(self, answer: str) -> set[str]:
        if self._types_of is None:
            self._types_of = {}
            for n in self.graph.nodes.values():
                key = " ".join(tokenize(self.graph.primary_name(n.id)))
                self._types_of.setdefault(key, set()).add(n.node_type)
        return self._types_of.get(" ".join(tokenize(answer)), set())

    def _type_ok(self, answer: str, query: str) -> bool:
        if self.graph is None:
            return True
        m = _WHICH.search(query.casefold())
        if m is None:
            return True
        wanted = {t for t in self.graph.schema.node_types if stem(t.casefold()) == stem(m.group(1))}
        return not wanted or bool(wanted & self._answer_types(answer))

    def value(self, path: State, query: str) -> float:
        observations = [
            s.observation for s in path.steps
            if s.action.kind != FINISH and s.env_error is None and not s.malformed
        ]
        seen_texts = list(observations)
        if self.graph is not None:
            # a successful retrieval reveals which node was hit, not just its id
            seen_texts += [
                self.graph.primary_name(s.retrieval[0][0]) for s in path.steps
                if s.action.kind == RETRIEVE and s.env_error is None and s.retrieval
            ]
        q = content_stem_set(query)
        seen = set().union(*(stem_set(t) for t in seen_texts))
        overlap = len(q & seen) / len(q) if q else 0.0
        grounded = 0.0
        answer = (path.final_answer or "").strip()
        ans = token_set(answer)
        if ans and not ans <= token_set(query):
            if any(ans <= token_set(obs) for obs in observations):
                if is_number(answer) == _expects_number(query) and self._type_ok(answer, query):
                    grounded = 1.0
        return min(1.0, max(0.0, 0.5 * overlap + 0.5 * grounded))


class LLMEvaluator:
    """Asks a chat model to grade the path from 0 to 10."""

    PROMPT = (
        "Rate from 0 to 10 how relevant and consistent the following reasoning path "
        "is for answering the question. Reply with a single number.\n\n"
        "Question: {question}\n{path}\nScore:"
    )

    def __init__(self, endpoint: ChatEndpoint):
        self.endpoint = endpoint

    def value(self, path: State, query: str) -> float:
        prompt = self.PROMPT.format(question=query, path=render_steps(path.steps))
        reply = self.endpoint.complete([{"role": "user", "content": prompt}], n=1,
                                       temperature=0.0)[0]
        nums = [float(x) for x in re.findall(r"\d+(?:\.\d+)?", reply)]
        if not nums:
            return 0.0
        return min(1.0, max(0.0, nums[0] / 10.0))


# ---------------------------------------------------------------------------
# the four stages


def ucb_score(q: float, n_s: int, n_sa: int, c: float) -> float:
    if n_sa == 0:
        return math.inf
    return q + c * math.sqrt(math.log(n_s) / n_sa)


def best_action(node: TreeNode, c: float) -> Action:
    best, best_score = None, -math.inf
    for a in node.ordered_actions():
        score = ucb_score(node.q_values[a], node.node_visits, node.visit_counts[a], c)
        if score > best_score:
            best, best_score = a, score
    return best


def select(root: TreeNode, cfg: MctsConfig) -> tuple[list[tuple[TreeNode, Action]], TreeNode]:
    """Descend by UCB until a node that is terminal, at the depth limit, or
    still has unexpanded candidates. Returns the (node, action) path and the leaf."""
    path: list[tuple[TreeNode, Action]] = []
    node = root
    while node.children and not node.is_expandable(cfg.max_depth):
        if node.state.terminal or node.state.depth >= cfg.max_depth:
            break
        a = best_action(node, cfg.c_explore)
        path.append((node, a))
        node = node.children[a]
    return path, node


def expand(leaf: TreeNode, policy: Policy, evaluator: Evaluator, env: Environment,
           cfg: MctsConfig, rng: np.random.Generator | None = None) -> list[TreeNode]:
    if leaf.state.terminal:
        raise TerminalStateError("cannot expand a terminal node")
    if leaf.proposals is None:
        leaf.proposals = policy.candidates(leaf.state, env, rng)
    todo = leaf.unexpanded()[: cfg.width]
    if not todo:
        raise ValueError("node has no unexpanded candidates")
    new = []
    for p in todo:
        child_state, _, _ = env.step(leaf.state, p.thought, p.action, malformed=p.malformed)
        v = evaluator.value(child_state, leaf.state.query)
        child = TreeNode(child_state, prior_value=v)
        leaf.children[p.action] = child
        leaf.q_values[p.action] = v
        leaf.visit_counts[p.action] = 1
        leaf.node_visits += 1
        new.append(child)
    return new


def simulate(start: TreeNode, rollout_policy: Policy, evaluator: Evaluator, env: Environment,
             cfg: MctsConfig, rng: np.random.Generator) -> tuple[Trajectory, float]:
    """Roll out from ``start`` until Finish or the depth limit.

    The returned trajectory covers the whole episode; ``logps`` holds None for
    the steps inherited from ``start``.
    """
    s = start.state
    states = []
    logps: list[float | None] = [None] * s.depth
    while not s.terminal and s.depth < cfg.max_depth:
        p = rollout_policy.sample(s, env, rng)
        states.append(s)
        logps.append(p.log_prob)
        s, _, _ = env.step(s, p.thought, p.action, malformed=p.malformed)
    v = evaluator.value(s, s.query)
    traj = Trajectory.from_state(s, states, logps=logps)
    return traj, v


def backpropagate(path: list[tuple[TreeNode, Action]], v_sim: float) -> None:
    for node, a in reversed(path):
        n = node.visit_counts[a]
        node.q_values[a] = (node.q_values[a] * n + v_sim) / (n + 1)
        node.visit_counts[a] = n + 1
        node.node_visits += 1


# ---------------------------------------------------------------------------
# receding-horizon driver


@dataclass
class MoveRecord:
    move_index: int
    root_action_stats: list[dict]
    committed_action: str

    def to_dict(self) -> dict:
        return {"move_index": self.move_index, "root_action_stats": self.root_action_stats,
                "committed_action": self.committed_action}


@dataclass
class SearchResult:
    answer: str
    trajectory: Trajectory
    moves: list[MoveRecord]
    root: TreeNode


def commit_action(node: TreeNode) -> Action:
    best, best_n = None, -1
    for a in node.ordered_actions():
        if node.visit_counts[a] > best_n:
            best, best_n = a, node.visit_counts[a]
    return best


def _rollout_policy(policy: Policy, temperature: float) -> Policy:
    if isinstance(policy, SoftmaxPolicy) and temperature != 1.0:
        p = policy.params
        return SoftmaxPolicy(PolicyParams(p.weights, p.temperature * temperature))
    return policy


def search(query: str, env: Environment, policy: Policy, evaluator: Evaluator,
           cfg: MctsConfig, rollout_policy: Policy | None = None) -> SearchResult:
    rng = np.random.default_rng(cfg.seed)
    rollout = rollout_policy or _rollout_policy(policy, cfg.rollout_temperature)
    state0 = env.reset(query)
    root = tree_root = TreeNode(state0, prior_value=evaluator.value(state0, query))
    moves: list[MoveRecord] = []
    committed_logps: list[float | None] = []
    while not root.state.terminal and root.state.depth < cfg.max_depth:
        for _ in range(cfg.simulations_per_move):
            path, leaf = select(root, cfg)
            if leaf.is_expandable(cfg.max_depth):
                expand(leaf, policy, evaluator, env, cfg, rng)
            _, v = simulate(leaf, rollout, evaluator, env, cfg, rng)
            backpropagate(path, v)
        a = commit_action(root)
        stats = [{"action": x.render(), "Q": root.q_values[x], "N": root.visit_counts[x]}
                 for x in root.ordered_actions()]
        moves.append(MoveRecord(len(moves), stats, a.render()))
        chosen = next(p for p in root.proposals if p.action == a)
        committed_logps.append(chosen.log_prob)
        root = root.children[a]
    final = root.state
    logps = committed_logps if all(x is not None for x in committed_logps) else None
    traj = Trajectory.from_state(final, logps=logps)
    return SearchResult(final.final_answer or "", traj, moves, tree_root)


def write_trace(path: str | Path, moves: list[MoveRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in moves:
            fh.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")


def read_trace(path: str | Path) -> list[MoveRecord]:
    with open(path, encoding="utf-8") as fh:
        return [MoveRecord(**json.loads(line)) for line in fh if line.strip()]
